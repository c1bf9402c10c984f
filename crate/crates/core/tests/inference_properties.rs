use postrate::divergences::{self, Grid, GridDensity};
use postrate::experiments::{generate_data, DataSource};
use postrate::inference::{average_predictive, factorization_check, restricted_path, PosteriorState};
use postrate::models::{build_gaussian_location_family, AtomicPrior, Context, FamilyMember, MarkovParam, Observation};
use proptest::prelude::*;

fn grid() -> Grid {
    Grid::new(-10.0, 10.0, 401).unwrap()
}

fn prior(means: &[f64], weights: &[f64]) -> AtomicPrior {
    AtomicPrior::new(build_gaussian_location_family(grid(), means, 1.0).unwrap(), weights.to_vec()).unwrap()
}

fn iid(ys: &[f64]) -> Vec<Observation> {
    ys.iter()
        .enumerate()
        .map(|(i, y)| Observation {
            y: *y,
            context: Context::at(i + 1),
        })
        .collect()
}

fn atoms() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-3.0f64..3.0, 0.05f64..1.0), 1..8).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn posterior_is_invariant_to_data_order(
        (means, weights) in atoms(),
        ys in prop::collection::vec(-4.0f64..4.0, 1..30),
    ) {
        let p = prior(&means, &weights);
        let mut forward = PosteriorState::new(&p);
        let mut backward = PosteriorState::new(&p);
        for obs in iid(&ys) {
            forward.observe(&obs).unwrap();
        }
        let mut rev = ys.clone();
        rev.reverse();
        for obs in iid(&rev) {
            backward.observe(&obs).unwrap();
        }
        for (a, b) in forward.weights().iter().zip(backward.weights()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((forward.log_evidence() - backward.log_evidence()).abs() < 1e-9);
    }

    #[test]
    fn restricted_path_matches_brute_force_products(
        (means, weights) in atoms(),
        ys in prop::collection::vec(-3.0f64..3.0, 1..12),
        pick in prop::collection::vec(any::<bool>(), 8),
    ) {
        let p = prior(&means, &weights);
        let truth = FamilyMember::density(usize::MAX, GridDensity::gaussian(grid(), 0.0, 1.0).unwrap());
        let mut subset: Vec<usize> = p.ids().into_iter().filter(|id| pick[*id]).collect();
        if subset.is_empty() {
            subset.push(0);
        }
        let data = iid(&ys);
        let path = restricted_path(&p, &data, &subset, &truth).unwrap();
        for i in 0..=data.len() {
            let mut total = 0.0;
            for (m, w) in p.family().iter().zip(p.weights()) {
                if !subset.contains(&m.id) {
                    continue;
                }
                let mut prod = *w;
                for obs in &data[..i] {
                    prod *= m.likelihood(obs.y, &obs.context).unwrap() / truth.likelihood(obs.y, &obs.context).unwrap();
                }
                total += prod;
            }
            prop_assert!((path.log_l[i] - total.ln()).abs() < 1e-9, "i = {}: {} vs {}", i, path.log_l[i], total.ln());
        }
    }

    #[test]
    fn factorization_holds_for_random_priors(
        (means, weights) in atoms(),
        ys in prop::collection::vec(-4.0f64..4.0, 1..50),
    ) {
        let r = factorization_check(&prior(&means, &weights), &iid(&ys)).unwrap();
        prop_assert!(r.abs_diff < 1e-9);
    }

    #[test]
    fn averaged_predictive_gap_is_below_cesaro_gap(
        (means, weights) in atoms(),
        seed in 0u64..500,
    ) {
        let p = prior(&means, &weights);
        let truth = GridDensity::gaussian(grid(), 0.0, 1.0).unwrap();
        let data = generate_data(&DataSource::from_density(&truth), 25, seed).unwrap();
        let mut state = PosteriorState::new(&p);
        let mut history = Vec::new();
        let mut cesaro = 0.0;
        for obs in &data {
            let predictive = state.predictive();
            cesaro += divergences::h_affinity_gap(&truth, &predictive.as_grid().unwrap()).unwrap();
            history.push(predictive);
            state.observe(obs).unwrap();
        }
        cesaro /= data.len() as f64;
        let average = average_predictive(&history).unwrap().as_grid().unwrap();
        let h_bar = divergences::h_affinity_gap(&truth, &average).unwrap();
        prop_assert!(h_bar <= cesaro + 1e-9, "{h_bar} > {cesaro}");
    }
}

#[test]
fn iid_draws_have_the_truth_moments() {
    let truth = GridDensity::gaussian(Grid::new(-10.0, 10.0, 2001).unwrap(), 0.0, 1.0).unwrap();
    let data = generate_data(&DataSource::from_density(&truth), 100_000, 11).unwrap();
    let n = data.len() as f64;
    let mean = data.iter().map(|o| o.y).sum::<f64>() / n;
    let var = data.iter().map(|o| (o.y - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "variance {var}");
}

#[test]
fn ar1_draws_have_the_truth_autocorrelation() {
    let p = MarkovParam::new(0.6).unwrap();
    let data = generate_data(&DataSource::Markov(p), 100_000, 5).unwrap();
    let ys: Vec<f64> = data.iter().map(|o| o.y).collect();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let cov = ys.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0);
    assert!((cov / var - 0.6).abs() < 0.01, "lag-1 {}", cov / var);
    assert!((var - 1.5625).abs() < 0.05, "variance {var}");
}

#[test]
fn same_seed_same_stream() {
    let p = MarkovParam::new(0.3).unwrap();
    let a = generate_data(&DataSource::Markov(p), 500, 42).unwrap();
    let b = generate_data(&DataSource::Markov(p), 500, 42).unwrap();
    assert_eq!(a, b);
}
