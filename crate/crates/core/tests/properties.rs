use nalgebra::DMatrix;
use proptest::prelude::*;
use qtmle::density_sl::{denby_mallows_boundaries, HazardBinLearner};
use qtmle::estimators::{estimate_aipw, estimate_ipw, tmle_missing};
use qtmle::{Dataset, EstimandKind, GridDistribution, NuisancePair, Propensity};

/// Small missing-outcome problem: sorted atoms per row, random simplex
/// weights, outcomes for the observed rows and propensities in (0.2, 1].
#[derive(Debug, Clone)]
struct Problem {
    data: Dataset,
    nuis: NuisancePair,
}

fn arb_problem() -> impl Strategy<Value = Problem> {
    (4usize..25, 2usize..8).prop_flat_map(|(n, k)| {
        (
            proptest::collection::vec(-5.0f64..5.0, n * k),
            proptest::collection::vec(0.05f64..1.0, n * k),
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(0.2f64..1.0, n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_filter_map("needs an observed unit", move |(mut atoms, mut w, y, e, mut m)| {
                m[0] = true;
                for r in atoms.chunks_mut(k) {
                    r.sort_by(f64::total_cmp);
                }
                for r in w.chunks_mut(k) {
                    let s: f64 = r.iter().sum();
                    r.iter_mut().for_each(|v| *v /= s);
                }
                let y: Vec<f64> = y.iter().zip(&m).map(|(&v, &o)| if o { v } else { f64::NAN }).collect();
                let data = Dataset::new(DMatrix::zeros(n, 1), m, y, EstimandKind::MissingOutcome).ok()?;
                let grid = GridDistribution::with_weights(atoms, w, n, k).ok()?;
                let nuis = NuisancePair::new(Propensity::new(e).ok()?, grid).ok()?;
                Some(Problem { data, nuis })
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn targeting_keeps_rows_on_the_simplex(p in arb_problem(), q in 0.05f64..0.95) {
        if let Ok(fit) = tmle_missing(&p.data, &p.nuis, q) {
            let k = fit.grid.n_atoms();
            for i in 0..fit.grid.n_rows() {
                let row = &fit.grid.weights()[i * k..(i + 1) * k];
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            prop_assert!(fit.diagnostics.likelihood_nondecreasing());
            prop_assert!(fit.grid.atoms().contains(&fit.theta));
        }
    }

    #[test]
    fn ipw_and_aipw_agree_without_missingness(
        y in proptest::collection::vec(-100.0f64..100.0, 1..60),
        q in 0.01f64..0.99,
    ) {
        // with every outcome observed and e = 1 the grid term cancels in AIPW
        let n = y.len();
        let data = Dataset::new(DMatrix::zeros(n, 1), vec![true; n], y.clone(), EstimandKind::MissingOutcome).unwrap();
        let grid = GridDistribution::uniform((0..n * 3).map(|i| (i % 3) as f64).collect(), n, 3).unwrap();
        let nuis = NuisancePair::new(Propensity::new(vec![1.0; n]).unwrap(), grid).unwrap();
        let ipw = estimate_ipw(&data, &nuis.propensity, q).unwrap().theta;
        let aipw = estimate_aipw(&data, &nuis, q).unwrap().theta;
        prop_assert_eq!(ipw, aipw);
    }

    #[test]
    fn extending_the_maximum_moves_only_the_last_cut(
        y in proptest::collection::vec(0.0f64..10.0, 12..40),
        extra in 0.5f64..5.0,
        k in 2usize..5,
    ) {
        let mut sorted = y.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        prop_assume!(sorted.len() >= k.max(2));
        let before = denby_mallows_boundaries(&y, 0.0, k).unwrap();
        let mut grown = y.clone();
        grown.push(sorted[sorted.len() - 1] + extra);
        let after = denby_mallows_boundaries(&grown, 0.0, k).unwrap();
        prop_assert_eq!(before.cuts[0], after.cuts[0]);
        prop_assert!(after.cuts.last().unwrap() > before.cuts.last().unwrap());
        for (a, b) in before.cuts.iter().zip(&after.cuts) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn hazard_bin_masses_sum_to_one(
        seed_rows in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 30..60),
        c in prop_oneof![Just(0.0), Just(1.0), Just(1e6)],
        k in 2usize..6,
    ) {
        let n = seed_rows.len();
        let x = DMatrix::from_fn(n, 1, |i, _| seed_rows[i].0);
        let y: Vec<f64> = seed_rows.iter().map(|(a, b)| a + 0.5 * b).collect();
        let fit = HazardBinLearner { c, k }.fit_hazard(&x, &y).unwrap();
        for i in 0..n {
            let total: f64 = fit.bin_probabilities(&[x[(i, 0)]]).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-10);
        }
    }
}
