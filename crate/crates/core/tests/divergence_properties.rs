use postrate::divergences::{self, Grid, GridDensity};
use proptest::prelude::*;

fn grid() -> Grid {
    Grid::new(-12.0, 12.0, 601).unwrap()
}

fn component() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.1f64..1.0, -3.0f64..3.0, 0.4f64..2.0)
}

fn density() -> impl Strategy<Value = GridDensity> {
    prop::collection::vec(component(), 1..4).prop_map(|parts| {
        let g = grid();
        let comps: Vec<GridDensity> = parts
            .iter()
            .map(|(_, m, s)| GridDensity::gaussian(g, *m, *s).unwrap())
            .collect();
        let refs: Vec<&GridDensity> = comps.iter().collect();
        let weights: Vec<f64> = parts.iter().map(|p| p.0).collect();
        GridDensity::mixture(&refs, &weights).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hellinger_is_a_metric(a in density(), b in density(), c in density()) {
        let ab = divergences::hellinger(&a, &b).unwrap();
        let ba = divergences::hellinger(&b, &a).unwrap();
        let bc = divergences::hellinger(&b, &c).unwrap();
        let ac = divergences::hellinger(&a, &c).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!(ab <= 2f64.sqrt() + 1e-12);
        prop_assert!(divergences::hellinger(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn affinity_gap_is_below_kl(a in density(), b in density()) {
        let h = divergences::h_affinity_gap(&a, &b).unwrap();
        let k = divergences::kl(&a, &b).unwrap();
        let hd = divergences::hellinger(&a, &b).unwrap();
        prop_assert!(h <= k + 1e-9);
        prop_assert!((h - hd * hd / 2.0).abs() < 1e-9);
        prop_assert!(divergences::v_divergence(&a, &b).unwrap() >= -1e-12);
    }

    #[test]
    fn starred_functionals_reduce_at_the_truth(a in density(), b in density()) {
        let pairs = [
            (divergences::kl_contrast(&a, &b, &a).unwrap(), divergences::kl(&a, &b).unwrap()),
            (divergences::v_star(&a, &b, &a).unwrap(), divergences::v_divergence(&a, &b).unwrap()),
            (divergences::h_star(&a, &b, &a).unwrap(), divergences::h_affinity_gap(&a, &b).unwrap()),
            (divergences::weighted_hellinger(&a, &b, &a).unwrap(), divergences::hellinger(&a, &b).unwrap()),
        ];
        for (starred, plain) in pairs {
            prop_assert!((starred - plain).abs() < 1e-9, "{starred} vs {plain}");
        }
    }

    #[test]
    fn starred_hellinger_bounded_by_gap_under_projection(f_star in density(), g in density(), f in density()) {
        let f_circ = postrate::experiments::segment_projection(&f_star, &g, &f).unwrap();
        let mass = divergences::likelihood_ratio_mass(&f_circ, &f, &f_star).unwrap();
        prop_assert!(mass <= 1.0 + 1e-9, "ratio mass {mass}");
        let hs = divergences::weighted_hellinger(&f_circ, &f, &f_star).unwrap();
        let gap = divergences::h_star(&f_circ, &f, &f_star).unwrap();
        prop_assert!(hs * hs / 2.0 <= gap + 1e-9);
    }

    #[test]
    fn sup_dominates_mean_over_sequences(
        xs in prop::collection::vec((density(), density()), 1..5),
    ) {
        let (a, b): (Vec<GridDensity>, Vec<GridDensity>) = xs.into_iter().unzip();
        let sup = divergences::max_hellinger(&a, &b).unwrap();
        let rms = divergences::mean_hellinger(&a, &b).unwrap();
        prop_assert!(sup * sup >= rms * rms - 1e-12);
    }

    #[test]
    fn mixture_weights_are_exchangeable(a in density(), b in density(), w in 0.01f64..0.99) {
        let ab = GridDensity::mixture(&[&a, &b], &[w, 1.0 - w]).unwrap();
        let ba = GridDensity::mixture(&[&b, &a], &[1.0 - w, w]).unwrap();
        for (x, y) in ab.values().iter().zip(ba.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn quadrature_converges_to_gaussian_closed_forms() {
    let mut last_err = f64::INFINITY;
    for points in [21, 41, 81, 161, 321] {
        let g = Grid::new(-10.0, 11.0, points).unwrap();
        let f = GridDensity::gaussian(g, 0.0, 1.0).unwrap();
        let h = GridDensity::gaussian(g, 1.0, 1.0).unwrap();
        let err = (divergences::kl(&f, &h).unwrap() - 0.5).abs()
            + (divergences::hellinger(&f, &h).unwrap() - (2.0 * (1.0 - (-1.0f64 / 8.0).exp())).sqrt()).abs();
        assert!(err <= last_err.max(1e-13), "error grew at {points} points: {err} > {last_err}");
        last_err = err;
    }
    assert!(last_err < 1e-10, "{last_err}");
}

#[test]
fn ar1_divergences_match_closed_form() {
    use postrate::divergences::{markov_divergences, StateWeighting};
    use postrate::models::MarkovParam;
    let state_grid = Grid::new(-9.0, 9.0, 721).unwrap();
    let truth = MarkovParam::new(0.6).unwrap();
    let weighting = StateWeighting::stationary(&truth, state_grid).unwrap();
    for theta in [0.0, 0.3, 0.6] {
        let p = MarkovParam::new(theta).unwrap();
        let d = markov_divergences(&truth, &p, &weighting, 4.0).unwrap();
        let expected = (0.6 - theta) * (0.6 - theta) / (2.0 * (1.0 - 0.36));
        assert!((d.k - expected).abs() < 1e-4, "theta {theta}: {} vs {expected}", d.k);
    }
}
