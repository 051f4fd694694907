use eqfree::basis::{monotone_repair, CoarseState, LegendreBasis};
use eqfree::cdr::{template_rescale, Template};
use eqfree::io;
use eqfree::observables::{
    conditional_icdfs, marginal_icdf, reporting_mesh, restrict_cdf, IcdfSamples, Interp, Orientation,
};
use eqfree::rng::RngStream;
use eqfree::sde::{step, Model, ParticleEnsemble, SdeParams};
use proptest::prelude::*;

fn ensemble(max: usize) -> impl Strategy<Value = ParticleEnsemble> {
    (2..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(-1e3f64..1e3, n),
        )
            .prop_map(|(x, y)| ParticleEnsemble::new(x, y).unwrap())
    })
}

fn orientation() -> impl Strategy<Value = Orientation> {
    prop_oneof![Just(Orientation::MARGINAL_X), Just(Orientation::MARGINAL_Y)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cdf_grid_is_a_cdf(e in ensemble(200)) {
        let (gx, gy) = reporting_mesh(&e);
        let g = restrict_cdf(&e, &gx, &gy).unwrap();
        let nx = gx.len();
        for r in 0..gy.len() {
            for c in 0..nx {
                let v = g.at(r, c);
                prop_assert!((0.0..=1.0).contains(&v));
                if c > 0 { prop_assert!(v >= g.at(r, c - 1)); }
                if r > 0 { prop_assert!(v >= g.at(r - 1, c)); }
            }
        }
    }

    #[test]
    fn observables_are_monotone_and_partition(e in ensemble(300), bands in 1usize..6, o in orientation()) {
        prop_assume!(e.len() >= 2 * bands);
        let m = marginal_icdf(&e, o).unwrap();
        prop_assert!(m.is_monotone());
        prop_assert_eq!(m.len(), e.len());
        let fam = conditional_icdfs(&e, bands, o).unwrap();
        prop_assert_eq!(fam.bands.iter().map(|b| b.len()).sum::<usize>(), e.len());
        prop_assert!(fam.bands.iter().all(|b| b.is_monotone()));
        prop_assert!(fam.levels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn repair_is_monotone_idempotent_and_mean_preserving(v in prop::collection::vec(-50f64..50.0, 1..60)) {
        let r = monotone_repair(&v);
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        let again = monotone_repair(&r);
        for (a, b) in r.iter().zip(&again) { prop_assert!((a - b).abs() < 1e-12); }
        let (sa, sb): (f64, f64) = (v.iter().sum(), r.iter().sum());
        prop_assert!((sa - sb).abs() < 1e-9 * (1.0 + sa.abs()));
    }

    #[test]
    fn monotone_polynomials_reconstruct_exactly(a in -10f64..10.0, b1 in 0f64..10.0, c3 in 0f64..10.0, c5 in 0f64..3.0) {
        let b = LegendreBasis::new(5);
        let g = |f: f64| {
            let z = 2.0 * f - 1.0;
            a + b1 * z + c3 * z.powi(3) + c5 * z.powi(5)
        };
        let ranks = IcdfSamples::midpoint_ranks(200);
        let (back, repair) = b.reconstruct(&b.project_fn(g), &ranks).unwrap();
        prop_assert!(repair < 1e-12);
        for (f, v) in ranks.iter().zip(back.values()) {
            prop_assert!((v - g(*f)).abs() < 1e-9 * (1.0 + g(*f).abs()));
        }
    }

    #[test]
    fn lift_then_restrict_keeps_shape(seed in any::<u64>(), bands in 1usize..5, o in orientation()) {
        let b = LegendreBasis::new(5);
        let s = CoarseState::from_icdfs(|f| 6.0 * f - 3.0, |f| 2.0 * f * f, bands, o, &b);
        let mut rng = RngStream::new(seed, 0).rng();
        let (e, _) = s.lift(&b, 100 * bands, &mut rng, Interp::NearestBand).unwrap();
        prop_assert_eq!(e.len(), 100 * bands);
        let r = CoarseState::restrict(&e, bands, o, &b).unwrap();
        prop_assert_eq!(r.beta.len(), bands + 1);
        // marginal coordinates sit at deterministic ranks: leading coefficient is exact to O(1/N)
        prop_assert!((r.beta[0][0] - s.beta[0][0]).abs() < 0.05);
    }

    #[test]
    fn template_rescale_pins_the_quantile(e in ensemble(300), m in 0.05f64..0.45, pos in 0.1f64..5.0) {
        let t = Template::new(-pos, m).unwrap();
        if let Ok((scaled, a)) = template_rescale(&e, &t, 3.0) {
            prop_assert!(a > 0.0);
            let q = eqfree::cdr::quantile_at(&scaled.x, m);
            prop_assert!((q + pos).abs() < 1e-9 * pos.max(1.0));
            for i in 0..e.len() {
                prop_assert!((scaled.y[i] * a.powi(3) - e.y[i]).abs() <= 1e-9 * e.y[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn ensemble_csv_round_trips_bitwise(e in ensemble(50)) {
        let mut buf = Vec::new();
        io::write_ensemble(&mut buf, &e).unwrap();
        prop_assert_eq!(io::read_ensemble(&buf[..]).unwrap(), e);
    }

    #[test]
    fn stepping_is_replayable(seed in any::<u64>(), steps in 0usize..20) {
        let p = SdeParams::new(5.0, 0.01, Model::DiffusiveXY).unwrap();
        let run = || {
            let mut rng = RngStream::new(seed, 4).rng();
            let mut e = ParticleEnsemble::uniform_square(50, 10.0, &mut rng);
            step(&mut e, &p, &mut rng, steps).unwrap();
            (e, rng.words_consumed())
        };
        let (a, wa) = run();
        let (b, wb) = run();
        prop_assert_eq!(a, b);
        prop_assert_eq!(wa, wb);
    }
}
