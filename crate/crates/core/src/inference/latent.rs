//! Latent-field structure shared by every likelihood evaluation of one model:
//! block layout, per-row incidence, sum-to-zero constraint groups, and the
//! hyperparameter-dependent prior precision.
//!
//! The latent vector is `[fixed effects | one segment per random effect]` with
//! random-effect segments in the canonical order of
//! [`RandomEffect`](crate::model::RandomEffect). Replicated walks store
//! replicate-major segments: replicate `r` of an `m`-knot walk occupies
//! positions `r*m .. (r+1)*m` of its segment.
//!
//! Every observation row activates (with coefficient 1) its design columns
//! plus exactly one latent index per random effect, so the observation matrix
//! is stored as one flat index list per row.

use nalgebra::DMatrix;

use crate::data::Panel;
use crate::model::effects::{
    cyclic_rw1_precision, distance, iid_precision, matern_field_precision, rw1_precision,
    MaternParams, PrecisionBlock,
};
use crate::model::{build_design, DesignMatrix, ModelSpec, RandomEffect};

use super::InferenceError;

/// Concrete hyperparameter values for one random-effect block, on natural
/// scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectHyper {
    /// Scalar precision multiplier for IID and walk blocks.
    Tau(f64),
    /// Matérn field marginal standard deviation and range.
    Matern { sigma: f64, range_km: f64 },
}

/// Natural-scale hyperparameter values for [`gaussian_approximation`]
/// (crate::inference::gaussian_approximation). Every random effect in the
/// model specification must have its value set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EffectHyperValues {
    pub iid_tau: Option<f64>,
    pub matern_sigma: Option<f64>,
    pub matern_range_km: Option<f64>,
    pub year_tau: Option<f64>,
    pub month_tau: Option<f64>,
}

/// One random-effect segment of the latent vector.
#[derive(Debug, Clone)]
pub(crate) struct EffectBlock {
    pub kind: RandomEffect,
    /// First latent index of the segment.
    pub offset: usize,
    /// Unit-precision structure (for the Matérn block this holds the field
    /// at placeholder parameters and is rebuilt per hyperparameter value).
    pub block: PrecisionBlock,
}

/// Prior precision at one hyperparameter configuration.
#[derive(Debug, Clone)]
pub(crate) struct PriorMatrices {
    /// Dense prior precision including the null-space ridge on constrained
    /// replicates (the ridge cancels exactly under the sum-to-zero
    /// constraints; see the module guide).
    pub q: DMatrix<f64>,
    /// Log generalized determinant: sum over blocks of
    /// `rank * ln(tau) + log pseudo-determinant(structure)`.
    pub log_gdet: f64,
    /// Total prior rank (sum of block ranks, plus the fixed-effect dimension
    /// when the fixed effects carry a proper prior).
    pub rank: usize,
}

/// Immutable per-model structure: design, outcomes, latent layout, and
/// constraint groups. Shared read-only across Newton sweeps, hyperparameter
/// evaluations, and posterior draws.
#[derive(Debug, Clone)]
pub struct LatentModel {
    pub(crate) design: DesignMatrix,
    pub(crate) y: Vec<u64>,
    pub(crate) n_fixed: usize,
    pub(crate) dim: usize,
    pub(crate) blocks: Vec<EffectBlock>,
    /// Sum-to-zero groups: global latent indices of each constrained
    /// replicate.
    pub(crate) groups: Vec<Vec<u32>>,
    /// Flat per-row latent incidence (design columns then one index per
    /// block), delimited by `row_ptr`.
    row_indices: Vec<u32>,
    row_ptr: Vec<usize>,
    pub(crate) centroids: Vec<(f64, f64)>,
    pub(crate) smoothness: f64,
    /// Gaussian precision of the fixed-effect prior; 0 = improper flat.
    pub(crate) fixed_precision: f64,
    pub(crate) median_centroid_distance: f64,
}

impl LatentModel {
    /// Build the latent structure for a panel and model specification.
    /// `fixed_precision` 0 gives the fixed effects an improper flat prior.
    pub fn build(
        panel: &Panel,
        spec: &ModelSpec,
        fixed_precision: f64,
    ) -> Result<LatentModel, InferenceError> {
        let design = build_design(panel, spec)?;
        if !(fixed_precision >= 0.0 && fixed_precision.is_finite()) {
            return Err(InferenceError::InvalidOption(format!(
                "fixed-effect precision must be finite and nonnegative, got {fixed_precision}"
            )));
        }
        let n_fixed = design.n_cols();
        let n_areas = panel.n_areas();
        let n_years = panel.n_years();
        let n_months = panel.n_months();

        let mut blocks = Vec::new();
        let mut offset = n_fixed;
        // Canonical segment order, independent of the spec's listing order.
        for kind in RandomEffect::all() {
            if !spec.has_effect(kind) {
                continue;
            }
            let block = match kind {
                RandomEffect::AreaIid => iid_precision(n_areas)?,
                RandomEffect::AreaMatern => {
                    // Placeholder parameters; rebuilt per hyperparameter value.
                    let params = MaternParams::new(1.0, 1.0f64.max(median_distance(&panel.centroids)), spec.matern_smoothness)?;
                    matern_field_precision(&panel.centroids, &params)?
                }
                RandomEffect::YearRw1 => {
                    if n_years < 2 {
                        return Err(InferenceError::EffectUnsupported {
                            effect: kind,
                            what: format!("at least 2 panel years (got {n_years})"),
                        });
                    }
                    rw1_precision(n_years, n_areas)?
                }
                RandomEffect::MonthCyclicRw1 => cyclic_rw1_precision(n_months, n_areas)?,
            };
            blocks.push(EffectBlock {
                kind,
                offset,
                block,
            });
            offset += blocks.last().unwrap().block.dim();
        }
        let dim = offset;

        let mut groups = Vec::new();
        for b in &blocks {
            if b.block.sum_to_zero {
                let m = b.block.per_replicate_dim();
                for r in 0..b.block.replicates {
                    let start = b.offset + r * m;
                    groups.push((start..start + m).map(|i| i as u32).collect());
                }
            }
        }

        let mut row_indices = Vec::with_capacity(design.n_rows() * (blocks.len() + 4));
        let mut row_ptr = Vec::with_capacity(design.n_rows() + 1);
        row_ptr.push(0);
        let mut y = Vec::with_capacity(design.n_rows());
        for (i, row) in panel.rows.iter().enumerate() {
            row_indices.extend_from_slice(design.row_cols(i));
            for b in &blocks {
                let within = match b.kind {
                    RandomEffect::AreaIid | RandomEffect::AreaMatern => row.area_index,
                    RandomEffect::YearRw1 => row.area_index * n_years + row.year_index,
                    RandomEffect::MonthCyclicRw1 => row.area_index * n_months + row.month_index,
                };
                debug_assert!(within < b.block.dim());
                row_indices.push((b.offset + within) as u32);
            }
            row_ptr.push(row_indices.len());
            y.push(row.outcome);
        }

        Ok(LatentModel {
            design,
            y,
            n_fixed,
            dim,
            blocks,
            groups,
            row_indices,
            row_ptr,
            centroids: panel.centroids.clone(),
            smoothness: spec.matern_smoothness,
            fixed_precision,
            median_centroid_distance: median_distance(&panel.centroids),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.groups.len()
    }

    pub fn coefficient_names(&self) -> &[String] {
        &self.design.names
    }

    pub fn median_centroid_distance(&self) -> f64 {
        self.median_centroid_distance
    }

    pub(crate) fn effects(&self) -> impl Iterator<Item = RandomEffect> + '_ {
        self.blocks.iter().map(|b| b.kind)
    }

    /// Latent indices active in observation row `i` (all coefficients 1).
    #[inline]
    pub(crate) fn row(&self, i: usize) -> &[u32] {
        &self.row_indices[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    #[inline]
    pub(crate) fn offset(&self, i: usize) -> f64 {
        self.design.offset[i]
    }

    /// Linear predictors `A u + offset` for every row.
    pub(crate) fn linear_predictors(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| self.row(i).iter().map(|&j| u[j as usize]).sum::<f64>() + self.offset(i))
            .collect()
    }

    /// Resolve the per-block hyperparameter list (canonical block order) from
    /// a named value set, requiring a value for every block present.
    pub(crate) fn resolve_hypers(
        &self,
        values: &EffectHyperValues,
    ) -> Result<Vec<EffectHyper>, InferenceError> {
        self.blocks
            .iter()
            .map(|b| {
                let missing = || InferenceError::MissingHyper(b.kind);
                Ok(match b.kind {
                    RandomEffect::AreaIid => EffectHyper::Tau(values.iid_tau.ok_or_else(missing)?),
                    RandomEffect::AreaMatern => EffectHyper::Matern {
                        sigma: values.matern_sigma.ok_or_else(missing)?,
                        range_km: values.matern_range_km.ok_or_else(missing)?,
                    },
                    RandomEffect::YearRw1 => {
                        EffectHyper::Tau(values.year_tau.ok_or_else(missing)?)
                    }
                    RandomEffect::MonthCyclicRw1 => {
                        EffectHyper::Tau(values.month_tau.ok_or_else(missing)?)
                    }
                })
            })
            .collect()
    }

    /// Assemble the dense prior precision and its determinant/rank
    /// bookkeeping at the given per-block hyperparameters (aligned with the
    /// canonical block order).
    ///
    /// Constrained replicates get a rank-one ridge `(tau/m) 11'` spanning
    /// exactly their null space: under the sum-to-zero constraints every
    /// quantity the engine reports is invariant to it, and it makes the
    /// Newton system positive definite even though the intercept and the
    /// replicate constants are unconstrained-confounded.
    pub(crate) fn assemble_prior(
        &self,
        hypers: &[EffectHyper],
    ) -> Result<PriorMatrices, InferenceError> {
        assert_eq!(hypers.len(), self.blocks.len());
        let mut q = DMatrix::zeros(self.dim, self.dim);
        let mut log_gdet = 0.0;
        let mut rank = 0usize;

        if self.fixed_precision > 0.0 {
            for i in 0..self.n_fixed {
                q[(i, i)] = self.fixed_precision;
            }
            log_gdet += self.n_fixed as f64 * self.fixed_precision.ln();
            rank += self.n_fixed;
        }

        for (b, &hyper) in self.blocks.iter().zip(hypers) {
            match (b.kind, hyper) {
                (RandomEffect::AreaMatern, EffectHyper::Matern { sigma, range_km }) => {
                    let params = MaternParams::new(sigma, range_km, self.smoothness)?;
                    let field = matern_field_precision(&self.centroids, &params)?;
                    let n = field.structure.nrows();
                    for i in 0..n {
                        for j in 0..n {
                            q[(b.offset + i, b.offset + j)] = field.structure[(i, j)];
                        }
                    }
                    log_gdet += field.log_gdet_structure;
                    rank += field.rank();
                }
                (_, EffectHyper::Tau(tau)) => {
                    if !(tau > 0.0 && tau.is_finite()) {
                        return Err(InferenceError::InvalidOption(format!(
                            "{:?} precision must be positive and finite, got {tau}",
                            b.kind
                        )));
                    }
                    let m = b.block.per_replicate_dim();
                    let ridge = if b.block.sum_to_zero { tau / m as f64 } else { 0.0 };
                    for r in 0..b.block.replicates {
                        let start = b.offset + r * m;
                        for i in 0..m {
                            for j in 0..m {
                                q[(start + i, start + j)] =
                                    tau * b.block.structure[(i, j)] + ridge;
                            }
                        }
                    }
                    log_gdet += b.block.rank() as f64 * tau.ln()
                        + b.block.replicates as f64 * b.block.log_gdet_structure;
                    rank += b.block.rank();
                }
                (kind, value) => {
                    return Err(InferenceError::InvalidOption(format!(
                        "hyperparameter {value:?} does not match effect {kind:?}"
                    )));
                }
            }
        }

        Ok(PriorMatrices { q, log_gdet, rank })
    }
}

/// Median pairwise distance between centroids (0 for a single point).
pub(crate) fn median_distance(points: &[(f64, f64)]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * (points.len().saturating_sub(1)) / 2);
    for i in 0..points.len() {
        for j in 0..i {
            d.push(distance(points[i], points[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::test_fixtures::{single_area_panel, small_panel};
    use crate::model::{FixedTerm, HeatKind};
    use approx::assert_relative_eq;

    fn spec_all() -> ModelSpec {
        ModelSpec::for_heat(HeatKind::ExtremeMaxTemp)
            .with_fixed_terms(vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat])
    }

    #[test]
    fn layout_follows_canonical_block_order() {
        let panel = small_panel(4, &[2012, 2013], 11);
        let model = LatentModel::build(&panel, &spec_all(), 0.0).unwrap();
        // fixed(2) + iid(4) + matern(4) + rw1(4 areas x 2 years) + cyclic(4 x 4).
        assert_eq!(model.n_fixed(), 2);
        assert_eq!(model.dim(), 2 + 4 + 4 + 8 + 16);
        // One sum-to-zero group per walk replicate.
        assert_eq!(model.n_constraints(), 4 + 4);
        // Group indices cover exactly the walk segments.
        let rw1_start = 2 + 4 + 4;
        assert_eq!(model.groups[0], vec![rw1_start as u32, rw1_start as u32 + 1]);
        let cyc_start = rw1_start + 8;
        assert_eq!(
            model.groups[4],
            (cyc_start as u32..cyc_start as u32 + 4).collect::<Vec<_>>()
        );
    }

    #[test]
    fn row_incidence_points_at_the_right_cells() {
        let panel = small_panel(3, &[2012, 2013, 2014], 7);
        let model = LatentModel::build(&panel, &spec_all(), 0.0).unwrap();
        let n_years = 3;
        let n_months = 4;
        for (i, row) in panel.rows.iter().enumerate() {
            let idx = model.row(i);
            // Design columns first (intercept always present).
            assert_eq!(idx[0], 0);
            let tail = &idx[idx.len() - 4..];
            let iid_off = model.n_fixed();
            let mat_off = iid_off + 3;
            let rw1_off = mat_off + 3;
            let cyc_off = rw1_off + 3 * n_years;
            assert_eq!(tail[0] as usize, iid_off + row.area_index);
            assert_eq!(tail[1] as usize, mat_off + row.area_index);
            assert_eq!(
                tail[2] as usize,
                rw1_off + row.area_index * n_years + row.year_index
            );
            assert_eq!(
                tail[3] as usize,
                cyc_off + row.area_index * n_months + row.month_index
            );
        }
    }

    #[test]
    fn linear_predictor_sums_active_cells_plus_offset() {
        let panel = small_panel(3, &[2012, 2013], 3);
        let model = LatentModel::build(&panel, &spec_all(), 0.0).unwrap();
        let u: Vec<f64> = (0..model.dim()).map(|i| (i as f64) * 0.01).collect();
        let eta = model.linear_predictors(&u);
        for (i, row) in panel.rows.iter().enumerate().take(40) {
            let expected: f64 = model.row(i).iter().map(|&j| u[j as usize]).sum::<f64>()
                + row.log_offset;
            assert_relative_eq!(eta[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_assembly_matches_block_arithmetic() {
        let panel = small_panel(4, &[2012, 2013, 2014], 23);
        let model = LatentModel::build(&panel, &spec_all(), 0.0).unwrap();
        let hypers = model
            .resolve_hypers(&EffectHyperValues {
                iid_tau: Some(2.0),
                matern_sigma: Some(0.8),
                matern_range_km: Some(25.0),
                year_tau: Some(5.0),
                month_tau: Some(3.0),
            })
            .unwrap();
        let prior = model.assemble_prior(&hypers).unwrap();
        assert_eq!(prior.q.nrows(), model.dim());

        // Fixed block (flat prior): zero precision.
        assert_eq!(prior.q[(0, 0)], 0.0);
        // IID block diagonal = tau.
        assert_relative_eq!(prior.q[(2, 2)], 2.0, epsilon = 1e-12);
        // RW1 replicate: tau * [1, -1; -1, 1]-pattern on 3 knots plus ridge tau/3.
        let rw1_off = 2 + 4 + 4;
        assert_relative_eq!(prior.q[(rw1_off, rw1_off)], 5.0 + 5.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(
            prior.q[(rw1_off, rw1_off + 1)],
            -5.0 + 5.0 / 3.0,
            epsilon = 1e-12
        );
        // Ridge rows sum to tau per row: R rows sum to 0, ridge adds tau/m * m.
        let row_sum: f64 = (0..3).map(|j| prior.q[(rw1_off, rw1_off + j)]).sum();
        assert_relative_eq!(row_sum, 5.0, epsilon = 1e-12);
        // No cross-replicate coupling.
        assert_eq!(prior.q[(rw1_off, rw1_off + 3)], 0.0);

        // Rank: iid 4 + matern 4 + rw1 4*(3-1) + cyclic 4*(4-1) = 28.
        assert_eq!(prior.rank, 28);
        // Log generalized determinant assembles the per-block pieces.
        let params = MaternParams::new(0.8, 25.0, 1.0).unwrap();
        let matern_gdet = matern_field_precision(&panel.centroids, &params)
            .unwrap()
            .log_gdet_structure;
        let expected_gdet = 4.0 * (2.0f64).ln()
            + matern_gdet
            + (8.0 * (5.0f64).ln() + 4.0 * (3.0f64).ln())
            + (12.0 * (3.0f64).ln() + 4.0 * 2.0 * (4.0f64).ln());
        assert_relative_eq!(prior.log_gdet, expected_gdet, epsilon = 1e-9);
    }

    #[test]
    fn fixed_effect_prior_contributes_when_proper() {
        let panel = single_area_panel(2012, 40, 1);
        let spec = spec_all().with_random_effects(vec![]);
        let model = LatentModel::build(&panel, &spec, 0.25).unwrap();
        let prior = model.assemble_prior(&[]).unwrap();
        assert_relative_eq!(prior.q[(0, 0)], 0.25, epsilon = 1e-12);
        assert_eq!(prior.rank, 2);
        assert_relative_eq!(prior.log_gdet, 2.0 * (0.25f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_year_rejects_year_walk() {
        let panel = small_panel(3, &[2012], 5);
        let err = LatentModel::build(&panel, &spec_all(), 0.0).unwrap_err();
        assert!(matches!(
            err,
            InferenceError::EffectUnsupported {
                effect: RandomEffect::YearRw1,
                ..
            }
        ));
    }

    #[test]
    fn median_distance_handles_small_sets() {
        assert_eq!(median_distance(&[(0.0, 0.0)]), 0.0);
        assert_relative_eq!(
            median_distance(&[(0.0, 0.0), (3.0, 4.0)]),
            5.0,
            epsilon = 1e-12
        );
        // Three points: distances 5, 5, 6 -> median 5.
        assert_relative_eq!(
            median_distance(&[(0.0, 0.0), (6.0, 0.0), (3.0, 4.0)]),
            5.0,
            epsilon = 1e-12
        );
    }
}
