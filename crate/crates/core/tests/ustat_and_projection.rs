use hoif_core::basis::{build_tensor_haar, project_function, BasisSystem, DiscreteBasis, ProjectionKernel, WeightMeasure};
use hoif_core::model::{Covariate, DiscreteModel, Func, ModelKind, Observation};
use hoif_core::ustat::{hoeffding_components, hoeffding_variance, symmetrize, ustat_order2};
use proptest::prelude::*;

/// All `n`-tuples of atom indices with their probabilities.
fn tuples(probs: &[f64], n: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = vec![(Vec::new(), 1.0)];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|(t, p)| {
                probs.iter().enumerate().map(move |(i, q)| {
                    let mut t = t.clone();
                    t.push(i);
                    (t, p * q)
                })
            })
            .collect();
    }
    out
}

/// Single-atom covariance model: observations are the four `(a, y)` pairs.
fn four_atom_model(pa: f64, py: f64) -> DiscreteModel {
    DiscreteModel::new(ModelKind::Covariance, vec![1.0], vec![pa], vec![py]).unwrap()
}

fn atom_index(x: &Observation) -> usize {
    2 * usize::from(x.a) + usize::from(x.y1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hoeffding_variance_matches_brute_force(
        pa in 0.1f64..0.9,
        py in 0.1f64..0.9,
        table in proptest::collection::vec(-2.0f64..2.0, 16),
        n in 2usize..=5,
    ) {
        let model = four_atom_model(pa, py);
        let t = table.clone();
        let kernel = symmetrize(move |x: &Observation, y: &Observation| t[4 * atom_index(x) + atom_index(y)]);
        let atoms = model.atoms();
        let probs: Vec<f64> = atoms.iter().map(|(_, p)| *p).collect();
        let (mut m1, mut m2) = (0.0, 0.0);
        for (tuple, p) in tuples(&probs, n) {
            let xs: Vec<Observation> = tuple.iter().map(|&i| atoms[i].0.clone()).collect();
            let u = ustat_order2(&xs, |x, y| kernel.eval(x, y)).unwrap();
            m1 += p * u;
            m2 += p * u * u;
        }
        let brute_var = m2 - m1 * m1;
        let c = hoeffding_components(&model, &kernel);
        prop_assert!((m1 - c.mean).abs() <= 1e-12, "unbiasedness: {m1} vs {}", c.mean);
        let v = hoeffding_variance(&model, &kernel, n).unwrap();
        prop_assert!((v - brute_var).abs() <= 1e-12, "{v} vs {brute_var}");
    }

    #[test]
    fn ustat_is_symmetric_under_permutation(xs in proptest::collection::vec(-5.0f64..5.0, 2..40), shift in 0usize..40) {
        let f = |x: &f64, y: &f64| (x - y).powi(2) + x * y;
        let u = ustat_order2(&xs, f).unwrap();
        let mut ys = xs.clone();
        let len = ys.len();
        ys.rotate_left(shift % len);
        ys.reverse();
        let v = ustat_order2(&ys, f).unwrap();
        prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
    }

    #[test]
    fn projection_reproduces_span_with_signed_weights(
        weights in proptest::collection::vec(0.1f64..2.0, 6),
        negate in any::<bool>(),
        coef in proptest::collection::vec(-3.0f64..3.0, 3),
        g in proptest::collection::vec(-3.0f64..3.0, 6),
    ) {
        let sign = if negate { -1.0 } else { 1.0 };
        let w: Vec<f64> = weights.iter().map(|v| sign * v).collect();
        let basis = DiscreteBasis::blocks(6, 3).unwrap();
        let pk = ProjectionKernel::on_natural_domain(BasisSystem::Discrete(basis), WeightMeasure::atoms(w.clone())).unwrap();
        let in_span = Func::atoms((0..6).map(|i| coef[i / 2]).collect());
        let p = project_function(&pk, &in_span);
        for j in 0..6 {
            let z = Covariate::Atom(j);
            prop_assert!((p.projected.eval(&z) - in_span.eval(&z)).abs() <= 1e-12);
            // reproducing property: int Pi(z, .) g w = (Pi g)(z)
            let via_kernel: f64 = (0..6).map(|i| pk.eval(&z, &Covariate::Atom(i)) * coef[i / 2] * w[i]).sum();
            prop_assert!((via_kernel - in_span.eval(&z)).abs() <= 1e-10);
        }
        let g = Func::atoms(g);
        let once = project_function(&pk, &g).projected;
        let twice = project_function(&pk, &once).projected;
        for j in 0..6 {
            let z = Covariate::Atom(j);
            prop_assert!((once.eval(&z) - twice.eval(&z)).abs() <= 1e-12);
        }
    }

    #[test]
    fn haar_projection_is_cell_average(level in 0u32..4, seed in 0u64..1000) {
        let basis = build_tensor_haar(1, level).unwrap();
        let pk = ProjectionKernel::on_natural_domain(basis, WeightMeasure::new(Func::constant(1.0))).unwrap();
        let cells = 1usize << level;
        let phase = seed as f64 / 1000.0;
        let cell_values: Vec<f64> = (0..cells).map(|i| (i as f64 + phase).sin()).collect();
        let cv = cell_values.clone();
        let g = Func::new(move |z| {
            let x = z.point().unwrap()[0];
            cv[((x * cells as f64) as usize).min(cells - 1)]
        });
        let p = project_function(&pk, &g).projected;
        for (i, v) in cell_values.iter().enumerate() {
            let z = Covariate::Point(vec![(i as f64 + 0.5) / cells as f64]);
            prop_assert!((p.eval(&z) - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn product_kernel_fixture() {
    // pairs (1,2), (1,3), (2,3): (2 + 3 + 6) / 3
    assert_eq!(ustat_order2(&[1.0, 2.0, 3.0], |x, y| x * y).unwrap(), 11.0 / 3.0);
}

#[test]
fn degenerate_kernel_variance_scaling() {
    // centered product kernel: first projection vanishes, so Var = 2 zeta2 / (n (n - 1))
    let model = four_atom_model(0.3, 0.6);
    let mean_a = 0.3;
    let kernel = symmetrize(move |x: &Observation, y: &Observation| {
        (f64::from(u8::from(x.a)) - mean_a) * (f64::from(u8::from(y.a)) - mean_a)
    });
    let c = hoeffding_components(&model, &kernel);
    assert!(c.zeta1.abs() < 1e-15);
    let zeta2 = (0.3f64 * 0.7).powi(2);
    assert!((c.zeta2 - zeta2).abs() < 1e-15);
    let scaled: Vec<f64> = [10usize, 20, 40, 80]
        .iter()
        .map(|&n| {
            let nf = n as f64;
            nf * (nf - 1.0) * hoeffding_variance(&model, &kernel, n).unwrap()
        })
        .collect();
    for s in &scaled {
        assert!((s - 2.0 * zeta2).abs() < 1e-10);
    }
}
