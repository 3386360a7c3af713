mod common;

use common::{dot, max_abs_diff, norm, regrad_oracle, Lcg};
use mmdg_core::regrad::{
    apply_modulation, fold_three, regrad2, speed_order, Case, ConvergenceState, ModulationMode,
    ParamGradients,
};
use mmdg_core::Modality;
use proptest::prelude::*;

#[test]
fn randomized_cases_match_oracle() {
    let mut rng = Lcg(11);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..400 {
        let n = 1 + (rng.next_u64() % 6) as usize;
        let gi = rng.vec(n, -2.0, 2.0);
        let gj = rng.vec(n, -2.0, 2.0);
        let (si, sj) = (rng.range(0.0, 3.0), rng.range(0.0, 3.0));
        let (ui, uj) = (rng.range(0.0, 2.0), rng.range(0.0, 2.0));
        let re = rng.range(0.0, 3.0);
        let (got, case) = regrad2(&gi, &gj, si, sj, ui, uj, re);
        let (want, name) = regrad_oracle(&gi, &gj, si, sj, ui, uj, re);
        assert_eq!(case.name(), name);
        assert!(max_abs_diff(&got, &want) <= 1e-9);
        seen.insert(name);
    }
    assert_eq!(seen.len(), 4, "{seen:?}");
}

#[test]
fn limit_of_large_penalty_keeps_only_base() {
    let gi = [0.5, -1.0, 2.0];
    let gj = [1.0, 0.3, 0.7];
    let (v, c) = regrad2(&gi, &gj, 2.0, 1.0, 0.0, 1.0, 1e6);
    assert_eq!(c, Case::B1);
    assert!(max_abs_diff(&v, &gi) < 1e-12);
    let gj = [-1.0, 0.3, -0.7];
    let (v, c) = regrad2(&gi, &gj, 2.0, 1.0, 0.0, 1.0, 1e6);
    assert_eq!(c, Case::B2);
    assert!(max_abs_diff(&v, &gi) < 1e-12);
}

#[test]
fn equal_gradients_keep_direction() {
    let g = [0.3, -0.4, 1.2];
    for ssp in [[1.0, 2.0, 3.0], [0.5, 0.5, 0.5], [3.0, 1.0, 2.0]] {
        let (v, _) = fold_three([&g, &g, &g], &ssp, &[0.0; 3], 1.0, ModulationMode::Full);
        let k = v[0] / g[0];
        assert!(k > 0.0);
        assert!(max_abs_diff(&v, &g.map(|x| x * k)) < 1e-12);
    }
}

#[test]
fn fold_with_two_zero_gradients_reduces_to_pair() {
    let z = [0.0, 0.0];
    let g = [1.0, -2.0];
    // Only the slowest modality is nonzero: pair fold degenerates to zero,
    // then the slowest keeps its own gradient.
    let (v, _) = fold_three(
        [&g, &z, &z],
        &[3.0, 1.0, 2.0],
        &[0.2; 3],
        1.0,
        ModulationMode::Full,
    );
    assert_eq!(v, g.to_vec());
    // Only the fastest is nonzero: it survives both folds as the sum.
    let (v, _) = fold_three(
        [&z, &g, &z],
        &[3.0, 1.0, 2.0],
        &[0.2; 3],
        1.0,
        ModulationMode::Full,
    );
    assert!(max_abs_diff(&v, &g) < 1e-12);
}

#[test]
fn speed_ties_follow_modality_order() {
    assert_eq!(
        speed_order(&[1.0, 1.0, 1.0]),
        [Modality::Rgb, Modality::Depth, Modality::Infrared]
    );
    assert_eq!(
        speed_order(&[2.0, 1.0, 1.0]),
        [Modality::Depth, Modality::Infrared, Modality::Rgb]
    );
}

#[test]
fn modulation_off_is_plain_sum_plus_ssp() {
    let mut mg = std::collections::BTreeMap::new();
    mg.insert(
        "head.weight".to_string(),
        ParamGradients {
            per_modality: [vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.25, 0.25]],
            ssp: vec![1.0, -1.0],
        },
    );
    let mut st = ConvergenceState::new(None);
    st.observe([0.3, 0.1, 0.2]);
    let (out, hist) = apply_modulation(&mg, &st, &[0.1, 0.2, 0.3], 1.0, 0.5, ModulationMode::Off);
    assert_eq!(
        out["head.weight"],
        vec![1.0 - 3.0 + 0.25 + 0.5, 2.0 + 0.5 + 0.25 - 0.5]
    );
    assert_eq!(hist["head"]["passthrough"], 2);
}

#[test]
fn single_active_modality_with_zero_lambda() {
    let mut mg = std::collections::BTreeMap::new();
    let g = vec![0.7, -0.1, 0.4];
    mg.insert(
        "adapter.block0.edgeR->D.q.weight".to_string(),
        ParamGradients {
            per_modality: [vec![0.0; 3], g.clone(), vec![0.0; 3]],
            ssp: vec![5.0; 3],
        },
    );
    let mut st = ConvergenceState::new(None);
    for ssp in [[0.1, 0.2, 0.3], [0.3, 0.2, 0.1], [0.2, 0.3, 0.1]] {
        st.observe(ssp);
        let (out, hist) = apply_modulation(&mg, &st, &[0.5; 3], 1.0, 0.0, ModulationMode::Full);
        assert!(max_abs_diff(&out["adapter.block0.edgeR->D.q.weight"], &g) < 1e-12);
        assert!(hist.contains_key("adapter.block0"));
    }
}

fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn b1_collinear_with_gi_and_c1_with_gj(gi in vecs(4), gj in vecs(4), u in 0.0f64..2.0, re in 0.0f64..3.0) {
        prop_assume!(norm(&gi) > 1e-3 && norm(&gj) > 1e-3);
        let d = dot(&gi, &gj);
        let (v, c) = regrad2(&gi, &gj, 2.0, 1.0, u, u, re);
        let (base, want) = if d >= 0.0 { (&gi, Case::B1) } else { (&gi, Case::B2) };
        prop_assert_eq!(c, want);
        if c == Case::B1 {
            // v = k·gi: the rejection of v from gi vanishes.
            let k = dot(&v, base) / dot(base, base);
            prop_assert!(max_abs_diff(&v, &base.iter().map(|x| k * x).collect::<Vec<_>>()) <= 1e-9);
        }
        let (v, c) = regrad2(&gi, &gj, 1.0, 2.0, u, u, re);
        if c == Case::C1 {
            let k = dot(&v, &gj) / dot(&gj, &gj);
            prop_assert!(max_abs_diff(&v, &gj.iter().map(|x| k * x).collect::<Vec<_>>()) <= 1e-9);
        }
    }

    #[test]
    fn b2_correction_is_orthogonal_to_gi(gi in vecs(5), gj in vecs(5)) {
        prop_assume!(norm(&gi) > 1e-3 && dot(&gi, &gj) < 0.0);
        let (v, c) = regrad2(&gi, &gj, 2.0, 1.0, 0.0, 0.0, 1.0);
        prop_assert_eq!(c, Case::B2);
        let delta: Vec<f64> = v.iter().zip(&gi).map(|(a, b)| a - b).collect();
        prop_assert!(dot(&delta, &gi).abs() <= 1e-9 * (1.0 + norm(&gi) * norm(&gj)));
    }

    #[test]
    fn damping_never_grows_faster_contribution(gi in vecs(4), gj in vecs(4), u1 in 0.0f64..2.0, du in 0.0f64..2.0, re in 0.0f64..3.0) {
        prop_assume!(norm(&gi) > 1e-3 && norm(&gj) > 1e-3);
        let contrib = |u: f64| {
            let (v, _) = regrad2(&gi, &gj, 2.0, 1.0, 0.0, u, re);
            norm(&v.iter().zip(&gi).map(|(a, b)| a - b).collect::<Vec<_>>())
        };
        prop_assert!(contrib(u1 + du) <= contrib(u1) + 1e-12);
    }

    #[test]
    fn fold_is_label_permutation_invariant(
        g in prop::collection::vec(vecs(3), 3),
        ssp in prop::collection::vec(0.0f64..3.0, 3),
        u in prop::collection::vec(0.0f64..1.0, 3),
        re in 0.0f64..2.0,
    ) {
        prop_assume!(ssp[0] != ssp[1] && ssp[1] != ssp[2] && ssp[0] != ssp[2]);
        let base = fold_three([&g[0], &g[1], &g[2]], &[ssp[0], ssp[1], ssp[2]], &[u[0], u[1], u[2]], re, ModulationMode::Full).0;
        for p in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let out = fold_three(
                [&g[p[0]], &g[p[1]], &g[p[2]]],
                &p.map(|k| ssp[k]),
                &p.map(|k| u[k]),
                re,
                ModulationMode::Full,
            ).0;
            prop_assert_eq!(&out, &base);
        }
    }

    #[test]
    fn outputs_stay_finite(g in prop::collection::vec(vecs(3), 3), ssp in prop::collection::vec(0.0f64..3.0, 3), re in 0.0f64..100.0) {
        for mode in ModulationMode::ALL {
            let (v, _) = fold_three([&g[0], &g[1], &g[2]], &[ssp[0], ssp[1], ssp[2]], &[0.3, 0.0, 1.0], re, mode);
            prop_assert!(v.iter().all(|x| x.is_finite()));
        }
    }
}
