use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skeleton_ode::layers::SkeletonGraph;
use skeleton_ode::ode::{ode_solve, sinusoidal_pe, unit_grid, Method, SolverSpec, VectorField};
use skeleton_ode::params::ParamStore;
use skeleton_ode::tensor::{grad_check_inputs, Graph, Tensor, Var};
use skeleton_ode::{Error, Result};

const METHODS: [Method; 3] = [Method::Euler, Method::Midpoint, Method::Rk4];

/// `dz/dt = cos(t) z` row by row, with solution `z0 exp(sin t1 - sin t0)`.
fn cos_field<'g>(g: &'g Graph<f64>) -> impl Fn(Var<'g, f64>, &[f64]) -> Result<Var<'g, f64>> {
    move |z, times| {
        let s = z.shape();
        let per_row: usize = s[1..].iter().product();
        let c = Tensor::from_fn(s.clone(), |i| times[i / per_row].cos());
        z.mul(g.constant(c))
    }
}

fn linear_field<'g>(lambda: f64) -> impl Fn(Var<'g, f64>, &[f64]) -> Result<Var<'g, f64>> {
    move |z, _| Ok(z.scale(lambda))
}

fn rows(z: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let n = z.shape()[0];
    (0..n).map(|r| z.rows(r, 1)).collect()
}

#[test]
fn substeps_match_a_finer_grid_bitwise() {
    let g = Graph::new();
    let f = cos_field(&g);
    let z0 = g.constant(Tensor::from_f64([2, 3], &[1.0, -0.5, 2.0, 0.3, 0.0, -1.2]).unwrap());
    for method in METHODS {
        let coarse = ode_solve(&f, z0, &unit_grid(0.0, 3), &[0.0, 0.25], SolverSpec::new(method, 4).unwrap()).unwrap();
        let grid: Vec<f64> = (0..=12).map(|i| i as f64 * 0.25).collect();
        let fine = ode_solve(&f, z0, &grid, &[0.0, 0.25], SolverSpec::new(method, 1).unwrap()).unwrap();
        assert_eq!(coarse.len(), 4);
        for (i, z) in coarse.iter().enumerate() {
            assert_eq!(z.value().data(), fine[4 * i].value().data(), "{method} point {i}");
        }
    }
}

#[test]
fn batched_shifts_match_rows_solved_alone() {
    let g = Graph::new();
    let f = cos_field(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = Tensor::from_fn([4, 2, 3], |_| rng.gen_range(-1.0..1.0));
    let shifts = [1.0, 2.0, 3.0, 4.5];
    for method in METHODS {
        let spec = SolverSpec::new(method, 2).unwrap();
        let batched = ode_solve(&f, g.constant(z.clone()), &unit_grid(0.0, 2), &shifts, spec).unwrap();
        for (r, row) in rows(&z).into_iter().enumerate() {
            let alone = ode_solve(&f, g.constant(row), &unit_grid(0.0, 2), &shifts[r..r + 1], spec).unwrap();
            for (b, a) in batched.iter().zip(&alone) {
                assert_eq!(b.value().rows(r, 1).data(), a.value().data());
            }
        }
    }
}

#[test]
fn solvers_converge_to_closed_form() {
    let g = Graph::new();
    let f = cos_field(&g);
    let z0 = g.constant(Tensor::from_f64([1, 1], &[1.5]).unwrap());
    let exact = 1.5 * (2.0f64.sin() - 0.5f64.sin()).exp();
    for (method, tol) in [(Method::Euler, 5e-2), (Method::Midpoint, 1e-3), (Method::Rk4, 1e-7)] {
        let out = ode_solve(&f, z0, &[0.5, 2.0], &[0.0], SolverSpec::new(method, 64).unwrap()).unwrap();
        let end = out[1].value().data()[0];
        assert!((end - exact).abs() < tol, "{method}: {end} vs {exact}");
    }
}

#[test]
fn rk4_integrates_quadratic_forcing_exactly() {
    let g = Graph::<f64>::new();
    // dz/dt = t^2, z = t^3 / 3
    let f = |z: Var<'_, f64>, times: &[f64]| {
        let c = Tensor::from_fn(z.shape(), |_| times[0] * times[0]);
        Ok::<_, Error>(g.constant(c))
    };
    let z0 = g.constant(Tensor::zeros([1, 1]));
    let out = ode_solve(&f, z0, &[0.0, 1.0, 3.0], &[0.0], SolverSpec::new(Method::Rk4, 1).unwrap()).unwrap();
    assert!((out[1].value().data()[0] - 1.0 / 3.0).abs() < 1e-14);
    assert!((out[2].value().data()[0] - 9.0).abs() < 1e-12);
}

#[test]
fn bad_grids_and_specs_are_rejected() {
    let g = Graph::new();
    let f = cos_field(&g);
    let z0 = g.constant(Tensor::zeros([1, 1]));
    let spec = SolverSpec::new(Method::Euler, 1).unwrap();
    assert!(matches!(ode_solve(&f, z0, &[], &[0.0], spec), Err(Error::Contract(_))));
    assert!(matches!(ode_solve(&f, z0, &[0.0, 0.0], &[0.0], spec), Err(Error::Contract(_))));
    assert!(matches!(SolverSpec::new(Method::Rk4, 0), Err(Error::Config(_))));
    assert!("heun".parse::<Method>().is_err());
    for m in METHODS {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
    }
}

#[test]
fn positional_encoding_examples() {
    let pe = sinusoidal_pe(0.0, 6, 10000.0).unwrap();
    assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let pe = sinusoidal_pe(2.0, 4, 10000.0).unwrap();
    assert!((pe[0] - 2.0f64.sin()).abs() < 1e-15 && (pe[1] - 2.0f64.cos()).abs() < 1e-15);
    assert!((pe[2] - (0.02f64).sin()).abs() < 1e-15);
}

#[test]
fn gradients_flow_through_the_learned_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let topo = SkeletonGraph::star(3).normalized();
    let field = VectorField::new(&mut store, "field", 4, 2, &topo, 10000.0, true, &mut rng).unwrap();
    let z0 = Tensor::from_fn([2, 3, 4], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn([2, 3, 4], |i| (i % 5) as f64 - 2.0);
    for method in METHODS {
        let report = grad_check_inputs(
            &store,
            |g, v| {
                let f = |z, t: &[f64]| field.eval(g, z, t);
                let out = ode_solve(&f, v[0], &unit_grid(0.0, 2), &[1.0, 2.0], SolverSpec::new(method, 2)?)?;
                Ok(out.last().unwrap().mul(g.constant(w.clone()))?.sum())
            },
            &[z0.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-5), "{method}: {report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn euler_on_linear_field_is_a_power(lambda in -2.0f64..2.0, n in 1usize..6, sub in 1usize..5, z in -3.0f64..3.0) {
        let g = Graph::new();
        let f = linear_field(lambda);
        let out = ode_solve(&f, g.constant(Tensor::from_f64([1], &[z]).unwrap()), &unit_grid(0.0, n), &[0.0], SolverSpec::new(Method::Euler, sub).unwrap()).unwrap();
        let h = 1.0 / sub as f64;
        for (k, v) in out.iter().enumerate() {
            let expect = z * (1.0 + lambda * h).powi((k * sub) as i32);
            prop_assert!((v.value().data()[0] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }
}
