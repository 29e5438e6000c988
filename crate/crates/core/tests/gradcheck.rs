//! Tape gradients against central finite differences, op by op and on
//! random composed graphs.

mod common;

use beamlora::{Tape, Tensor, Var};
use common::*;
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Checks the gradient of `build(params) -> loss` for every entry of every
/// parameter.
fn check_graph(params: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let value = |ps: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).data()[0]
    };
    for (pi, p) in params.iter().enumerate() {
        let g = grads.get(vars[pi]).expect("parameter reaches the loss");
        for j in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += EPS;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= EPS;
            let fd = (value(&plus) - value(&minus)) / (2.0 * EPS);
            let a = g.data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= TOL, "param {pi} entry {j}: analytic {a}, numeric {fd}");
        }
    }
}

#[test]
fn matmul_add_sub_mul() {
    let mut rng = rng(10);
    for _ in 0..20 {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let params = [
            uniform(&[m, k], &mut rng),
            uniform(&[k, n], &mut rng),
            uniform(&[m, n], &mut rng),
            uniform(&[m, n], &mut rng),
        ];
        check_graph(&params, |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let q = t.add(p, v[2]).unwrap();
            let r = t.sub(q, v[3]).unwrap();
            let s = t.mul(r, p).unwrap();
            t.sum(s)
        });
    }
}

#[test]
fn softmax_scale_rows_and_scale() {
    let mut rng = rng(11);
    for _ in 0..20 {
        let (r, k) = (rng.random_range(1..6), rng.random_range(1..5));
        let params = [uniform(&[r], &mut rng).scale(3.0), uniform(&[r, k], &mut rng), uniform(&[r, k], &mut rng)];
        check_graph(&params, |t, v| {
            let s = t.softmax(v[0]).unwrap();
            let a = t.scale_rows(v[1], s).unwrap();
            let b = t.mul(a, v[2]).unwrap();
            let c = t.scale(b, 1.7);
            t.sum(c)
        });
    }
}

#[test]
fn squared_error_and_cross_entropy() {
    let mut rng = rng(12);
    for _ in 0..20 {
        let (c, n) = (rng.random_range(2..6), rng.random_range(1..5));
        let target = uniform(&[c, n], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let params = [uniform(&[c, c], &mut rng), uniform(&[c, n], &mut rng).scale(2.0)];
        check_graph(&params, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            t.squared_error(y, &target).unwrap()
        });
        check_graph(&params, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            t.cross_entropy(y, &labels).unwrap()
        });
    }
}

#[test]
fn reused_nodes_accumulate() {
    let mut rng = rng(13);
    let params = [uniform(&[3, 3], &mut rng)];
    check_graph(&params, |t, v| {
        let sq = t.matmul(v[0], v[0]).unwrap();
        let cube = t.matmul(sq, v[0]).unwrap();
        let both = t.add(cube, sq).unwrap();
        let m = t.mul(both, v[0]).unwrap();
        t.sum(m)
    });
}

#[test]
fn model_graphs_match_finite_differences() {
    let mut rng = rng(14);
    for _ in 0..30 {
        let case = random_grad_case(&mut rng);
        let err = max_gradient_error(&case, EPS);
        assert!(err <= TOL, "relative error {err}");
    }
}
