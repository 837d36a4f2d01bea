//! Property tests for the structural invariants: serialization round-trips,
//! slicing composition, pooling linearity, and hesitation-profile laws.

use proptest::prelude::*;

use d2monitor::hesitation::profile;
use d2monitor::trajectory::{Dataset, RawTrajectory, Trajectory};

fn finite_f32() -> impl Strategy<Value = f64> {
    // values representable in the on-disk f32 format
    (-1e6f32..1e6f32).prop_map(|v| v as f64)
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..6, 1usize..5).prop_flat_map(|(n, steps, dim)| {
        let sample = (
            proptest::collection::vec(finite_f32(), steps * dim),
            proptest::collection::vec(0.0f64..5.0, steps).prop_map(|v| {
                v.into_iter().map(|x| x as f32 as f64).collect::<Vec<_>>()
            }),
            0u8..2,
        )
            .prop_map(move |(states, entropy, label)| {
                Trajectory::new(steps, dim, states)
                    .unwrap()
                    .with_entropy(entropy)
                    .unwrap()
                    .with_label(label)
                    .unwrap()
            });
        proptest::collection::vec(sample, n..n + 1)
            .prop_map(|samples| Dataset::new(samples).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_write_read_is_identity(ds in arb_dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.d2t");
        ds.write(&path).unwrap();
        let back = Dataset::read(&path).unwrap();
        // every stored value is f32-representable, so this is exact
        prop_assert_eq!(&ds, &back);
        let again = dir.path().join("q.d2t");
        back.write(&again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn slicing_composes(
        states in proptest::collection::vec(finite_f32(), 10 * 3),
        outer in (0usize..10, 0usize..10),
        inner in (0usize..10, 0usize..10),
    ) {
        let t = Trajectory::new(10, 3, states).unwrap();
        let (a, b) = (outer.0.min(outer.1), outer.0.max(outer.1));
        let width = b - a;
        let c = inner.0 % (width + 1);
        let d = inner.1 % (width + 1);
        let (c, d) = (c.min(d), c.max(d));
        let composed = t.slice_window(a, b).unwrap().slice_window(c, d).unwrap();
        let direct = t.slice_window(a + c, a + d).unwrap();
        prop_assert_eq!(composed, direct);
    }

    #[test]
    fn token_pooling_is_linear(
        xs in proptest::collection::vec(-100.0f64..100.0, 2 * 3 * 4),
        ys in proptest::collection::vec(-100.0f64..100.0, 2 * 3 * 4),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
        let px = RawTrajectory::new(2, 3, 4, xs).unwrap().mean_pool_tokens();
        let py = RawTrajectory::new(2, 3, 4, ys).unwrap().mean_pool_tokens();
        let pc = RawTrajectory::new(2, 3, 4, combo).unwrap().mean_pool_tokens();
        for i in 0..pc.len() {
            let want = a * px[i] + b * py[i];
            prop_assert!((pc[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn profile_laws(
        margins in proptest::collection::vec(-2.0f64..2.0, 1..20),
        tau in 0.01f64..1.5,
        scale in 0.1f64..50.0,
    ) {
        let p = profile(&margins, tau);
        // severity counts the flags, window is minimal and flag-bounded
        prop_assert_eq!(p.n_tau, p.flags.iter().filter(|&&f| f).count());
        match p.window {
            Some((lo, hi)) => {
                prop_assert!(p.n_tau >= 1);
                prop_assert!(p.flags[lo] && p.flags[hi]);
                for (s, f) in p.flags.iter().enumerate() {
                    prop_assert!(!f || (s >= lo && s <= hi));
                }
            }
            None => prop_assert_eq!(p.n_tau, 0),
        }
        // hesitant-by-minimum equals severity >= 1
        let min_abs = margins.iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(min_abs < tau, p.n_tau >= 1);
        // joint rescaling changes nothing structural
        let scaled: Vec<f64> = margins.iter().map(|d| scale * d).collect();
        let q = profile(&scaled, scale * tau);
        prop_assert_eq!(p.flags, q.flags);
        prop_assert_eq!(p.window, q.window);
        // severity is monotone in tau
        let larger = profile(&margins, tau * 2.0);
        prop_assert!(larger.n_tau >= p.n_tau);
    }
}
