use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::RankTiedAdapter;
use crate::error::{LrvdError, Result};
use crate::numerics::{svd, Matrix, RngState};
use crate::parallel::{map_indexed, Execution};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    Svd,
    LearnedAlpha,
    /// A permutation of the adapter's active ranks.
    RandomPermutation(Vec<usize>),
}

impl Ordering {
    pub fn label(&self) -> &'static str {
        match self {
            Ordering::Svd => "svd",
            Ordering::LearnedAlpha => "learned-alpha",
            Ordering::RandomPermutation(_) => "random-permutation",
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Cumulative energy fractions `e_0..e_r` over the active ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    pub ordering: String,
    pub fractions: Vec<f64>,
    /// Mean of `e_1..e_r`.
    pub auc: f64,
}

impl EnergyCurve {
    fn from_fractions(ordering: &Ordering, fractions: Vec<f64>) -> Self {
        let r = fractions.len() - 1;
        let auc = if r == 0 { 0.0 } else { fractions[1..].iter().sum::<f64>() / r as f64 };
        Self {
            ordering: ordering.label().into(),
            fractions,
            auc,
        }
    }
}

/// Active ranks sorted by increasing `log α`, ties by descending component
/// norm, then by index.
pub fn learned_order(adapter: &RankTiedAdapter) -> Vec<usize> {
    let mut ranks: Vec<(usize, f64, f64)> = adapter
        .active_ranks()
        .into_iter()
        .map(|i| (i, adapter.log_alpha[i], adapter.component(i).frobenius_norm()))
        .collect();
    ranks.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    ranks.into_iter().map(|(i, _, _)| i).collect()
}

/// Unnormalized energies `E_0..E_r`: squared Frobenius norms of partial
/// rank sums (component orderings) or cumulative `σ²` (svd).
pub fn energy_curve_unnormalized(adapter: &RankTiedAdapter, ordering: &Ordering) -> Result<Vec<f64>> {
    let active = adapter.active_ranks();
    let r = active.len();
    let order = match ordering {
        Ordering::Svd => {
            let sigma = svd(&adapter.delta_w())?.sigma;
            let mut out = vec![0.0];
            for s in sigma.iter().take(r) {
                out.push(out.last().unwrap() + s * s);
            }
            out.resize(r + 1, *out.last().unwrap());
            return Ok(out);
        }
        Ordering::LearnedAlpha => learned_order(adapter),
        Ordering::RandomPermutation(p) => {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != active {
                return Err(LrvdError::InvalidArgument(format!(
                    "ordering {p:?} is not a permutation of the active ranks {active:?}"
                )));
            }
            p.clone()
        }
    };
    let mut partial = Matrix::zeros(adapter.d_out(), adapter.d_in());
    let mut out = Vec::with_capacity(r + 1);
    out.push(0.0);
    for i in order {
        partial.add_assign(&adapter.component(i))?;
        out.push(partial.frobenius_norm_sq());
    }
    Ok(out)
}

/// Normalized energy curve. Partial sums of non-orthogonal components can
/// overshoot the total; fractions are clipped to `[0, 1]` and the last
/// one is exactly 1.
pub fn energy_curve(adapter: &RankTiedAdapter, ordering: &Ordering) -> Result<EnergyCurve> {
    let raw = energy_curve_unnormalized(adapter, ordering)?;
    let total = match ordering {
        Ordering::Svd => *raw.last().unwrap(),
        _ => adapter.delta_w().frobenius_norm_sq(),
    };
    if !(total > 0.0) {
        return Err(LrvdError::ZeroUpdate(
            "adapter mean update is zero, energy fractions are undefined; use the unnormalized curve".into(),
        ));
    }
    let mut fractions: Vec<f64> = raw.iter().map(|e| (e / total).clamp(0.0, 1.0)).collect();
    *fractions.last_mut().unwrap() = 1.0;
    Ok(EnergyCurve::from_fractions(ordering, fractions))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaugeRow {
    pub adapter: usize,
    pub n_active: usize,
    pub auc_svd: f64,
    pub auc_learned: f64,
    pub auc_random_mean: f64,
    pub auc_random_std: f64,
    pub improvement: f64,
    pub svd: EnergyCurve,
    pub learned: EnergyCurve,
    pub random: Vec<EnergyCurve>,
}

impl GaugeRow {
    pub const CSV_HEADER: &'static str =
        "adapter,n_active,auc_svd,auc_learned,auc_random_mean,auc_random_std,improvement";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.adapter,
            self.n_active,
            self.auc_svd,
            self.auc_learned,
            self.auc_random_mean,
            self.auc_random_std,
            self.improvement
        )
    }

    /// `adapter,ordering,permutation,k,energy` lines for every curve.
    pub fn curve_csv_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let mut emit = |curve: &EnergyCurve, perm: Option<usize>| {
            let p = perm.map(|p| p.to_string()).unwrap_or_default();
            for (k, e) in curve.fractions.iter().enumerate() {
                lines.push(format!("{},{},{},{},{}", self.adapter, curve.ordering, p, k, e));
            }
        };
        emit(&self.svd, None);
        emit(&self.learned, None);
        for (i, c) in self.random.iter().enumerate() {
            emit(c, Some(i));
        }
        lines
    }

    pub const CURVE_CSV_HEADER: &'static str = "adapter,ordering,permutation,k,energy";
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaugeReport {
    pub rows: Vec<GaugeRow>,
    /// Adapters left out, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Compares svd, learned and `n_random` random orderings per adapter.
/// Adapter `i` draws its permutations from `rng.split(i)`.
pub fn gauge_ordering_experiment(
    adapters: &[RankTiedAdapter],
    n_random: usize,
    rng: &RngState,
    exec: Execution,
) -> Result<GaugeReport> {
    let results = map_indexed(adapters.len(), exec, |i| -> Result<Option<GaugeRow>> {
        let a = &adapters[i];
        let active = a.active_ranks();
        if active.len() < 2 {
            return Ok(None);
        }
        let svd_curve = energy_curve(a, &Ordering::Svd)?;
        let learned = energy_curve(a, &Ordering::LearnedAlpha)?;
        let mut local = rng.split(i as u64);
        let random = (0..n_random)
            .map(|_| {
                let p: Vec<usize> = local.permutation(active.len()).into_iter().map(|j| active[j]).collect();
                energy_curve(a, &Ordering::RandomPermutation(p))
            })
            .collect::<Result<Vec<_>>>()?;
        let aucs: Vec<f64> = random.iter().map(|c| c.auc).collect();
        let (mean, std) = mean_std(&aucs);
        Ok(Some(GaugeRow {
            adapter: i,
            n_active: active.len(),
            auc_svd: svd_curve.auc,
            auc_learned: learned.auc,
            auc_random_mean: mean,
            auc_random_std: std,
            improvement: learned.auc - mean,
            svd: svd_curve,
            learned,
            random,
        }))
    });
    let mut report = GaugeReport::default();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(row) => report.rows.push(row),
            None => report
                .skipped
                .push((i, format!("adapter {i} has fewer than 2 active ranks"))),
        }
    }
    Ok(report)
}

/// Mean and sample standard deviation; the deviation of fewer than two
/// values is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::random_orthonormal_columns;

    /// Adapter whose components are mutually orthogonal with norms `sigma`,
    /// stored in the rank order given by `slots`.
    fn planted(sigma: &[f64], log_alpha: Vec<f64>, seed: u64) -> RankTiedAdapter {
        let r = sigma.len();
        let mut rng = RngState::new(seed);
        let u = random_orthonormal_columns(&mut rng, 6, r).unwrap();
        let v = random_orthonormal_columns(&mut rng, 5, r).unwrap();
        let mu_b = u.scale_cols(sigma).unwrap();
        let mu_a = v.transpose();
        // λ/r = 1 so components are exactly σ_i u_i v_iᵀ.
        RankTiedAdapter::from_parts(mu_a, mu_b, log_alpha, r as f64).unwrap()
    }

    #[test]
    fn svd_curve_matches_singular_values() {
        let a = planted(&[1.0, 3.0, 2.0], vec![-5.0, -5.0, -5.0], 1);
        let c = energy_curve(&a, &Ordering::Svd).unwrap();
        let expected = [0.0, 9.0 / 14.0, 13.0 / 14.0, 1.0];
        for (x, y) in c.fractions.iter().zip(expected) {
            assert!((x - y).abs() < 1e-12, "{:?}", c.fractions);
        }
        assert!((c.auc - (9.0 + 13.0 + 14.0) / 42.0).abs() < 1e-12);
    }

    #[test]
    fn learned_order_on_orthogonal_components_equals_svd() {
        let a = planted(&[1.0, 3.0, 2.0], vec![-2.0, -6.0, -4.0], 2);
        let s = energy_curve(&a, &Ordering::Svd).unwrap();
        let l = energy_curve(&a, &Ordering::LearnedAlpha).unwrap();
        for (x, y) in s.fractions.iter().zip(&l.fractions) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn learned_ties_break_by_norm_then_index() {
        let a = planted(&[1.0, 3.0, 3.0, 2.0], vec![-1.0; 4], 3);
        assert_eq!(learned_order(&a), vec![1, 2, 3, 0]);
    }

    #[test]
    fn every_ordering_ends_at_one() {
        let mut rng = RngState::new(5);
        let a = RankTiedAdapter::from_parts(
            rng.gaussian_matrix(4, 7, 0.0, 1.0).unwrap(),
            rng.gaussian_matrix(6, 4, 0.0, 1.0).unwrap(),
            vec![-3.0, 1.0, -1.0, 0.0],
            16.0,
        )
        .unwrap();
        for o in [Ordering::Svd, Ordering::LearnedAlpha, Ordering::RandomPermutation(vec![2, 0, 3, 1])] {
            let c = energy_curve(&a, &o).unwrap();
            assert_eq!(*c.fractions.last().unwrap(), 1.0);
            assert_eq!(c.fractions[0], 0.0);
            assert!(c.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
        }
        let s = energy_curve(&a, &Ordering::Svd).unwrap();
        assert!(s.fractions.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_update_is_an_error() {
        let mut rng = RngState::new(6);
        let a = RankTiedAdapter::init(5, 4, 3, 16.0, -8.0, &mut rng).unwrap();
        let err = energy_curve(&a, &Ordering::LearnedAlpha).unwrap_err();
        assert!(matches!(err, LrvdError::ZeroUpdate(_)));
        assert!(err.to_string().contains("unnormalized"));
        assert_eq!(energy_curve_unnormalized(&a, &Ordering::LearnedAlpha).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn bad_permutation_rejected() {
        let a = planted(&[1.0, 2.0], vec![0.0, 0.0], 7);
        assert!(energy_curve(&a, &Ordering::RandomPermutation(vec![0, 0])).is_err());
    }

    #[test]
    fn dominant_planted_rank_improves_over_random() {
        // Oracle: enumerate all 6 orderings of 3 orthogonal components and
        // compare the learned AUC against their mean.
        let sigma = [0.5, 4.0, 1.0];
        let a = planted(&sigma, vec![-1.0, -7.0, -3.0], 8);
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let auc_of = |p: &[usize; 3]| {
            let mut acc = 0.0;
            let mut sum = 0.0;
            for &i in p {
                acc += sigma[i] * sigma[i];
                sum += acc / total;
            }
            sum / 3.0
        };
        let mean_all = perms.iter().map(auc_of).sum::<f64>() / 6.0;
        let best = perms.iter().map(auc_of).fold(0.0, f64::max);
        let report = gauge_ordering_experiment(&[a], 20, &RngState::new(9), Execution::Sequential).unwrap();
        let row = &report.rows[0];
        assert!((row.auc_learned - best).abs() < 1e-10);
        assert!(row.auc_learned > mean_all);
        assert!(row.improvement > 0.0);
        assert!(row.auc_svd >= row.auc_learned - 1e-12);
    }

    #[test]
    fn single_rank_adapters_are_skipped() {
        let mut a = planted(&[1.0, 2.0], vec![0.0, 6.0], 10);
        a.prune(4.0);
        let report = gauge_ordering_experiment(&[a], 5, &RngState::new(1), Execution::Sequential).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.skipped.len(), 1);
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
