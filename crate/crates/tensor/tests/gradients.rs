use corrdet_tensor::check::check_gradients;
use corrdet_tensor::{Graph, SumOrder, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Contracts any output with fixed random weights so every element matters.
fn readout<'g>(g: &'g Graph, v: Var<'g>, seed: u64) -> Var<'g> {
    let w = g.constant(rnd(&v.shape(), seed ^ 0xabcdef));
    v.mul(w).sum_all()
}

fn assert_grad<F>(f: F, inputs: &[Tensor])
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let r = check_gradients(f, inputs, H, FLOOR, None);
    assert!(
        r.max_rel_error < TOL,
        "max rel error {} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn elementwise_ops() {
    let a = rnd(&[3, 4], 1);
    let b = rnd(&[3, 4], 2);
    assert_grad(|g, v| readout(g, v[0].add(v[1]), 1), &[a.clone(), b.clone()]);
    assert_grad(|g, v| readout(g, v[0].sub(v[1]), 2), &[a.clone(), b.clone()]);
    assert_grad(|g, v| readout(g, v[0].mul(v[1]), 3), &[a.clone(), b.clone()]);
    assert_grad(|g, v| readout(g, v[0].sigmoid(), 4), &[a.clone()]);
    assert_grad(|g, v| readout(g, v[0].gelu(), 5), &[a.clone()]);
    assert_grad(|g, v| readout(g, v[0].scale(-1.5).add_scalar(2.0), 6), &[a]);
}

#[test]
fn row_broadcasts() {
    let a = rnd(&[3, 4], 3);
    let r = rnd(&[4], 4);
    assert_grad(|g, v| readout(g, v[0].add_row(v[1]), 7), &[a.clone(), r.clone()]);
    assert_grad(|g, v| readout(g, v[0].mul_row(v[1]), 8), &[a, r]);
}

#[test]
fn matrix_products() {
    let a = rnd(&[3, 5], 5);
    let b = rnd(&[5, 2], 6);
    let bt = rnd(&[2, 5], 7);
    assert_grad(|g, v| readout(g, v[0].matmul(v[1]), 9), &[a.clone(), b.clone()]);
    assert_grad(|g, v| readout(g, v[0].matmul_nt(v[1]), 10), &[a.clone(), bt]);
    assert_grad(|g, v| readout(g, v[0].matmul_sorted(v[1]), 11), &[a.clone(), b]);
    assert_grad(|g, v| readout(g, v[0].transpose(), 12), &[a.clone()]);
    assert_grad(|g, v| readout(g, v[0].reshape(&[5, 3]), 13), &[a]);
}

#[test]
fn softmax_and_norms() {
    let a = rnd(&[4, 6], 8);
    let gm = rnd(&[6], 9);
    let bt = rnd(&[6], 10);
    assert_grad(
        |g, v| readout(g, v[0].softmax_rows(SumOrder::Sequential), 14),
        &[a.clone()],
    );
    assert_grad(|g, v| readout(g, v[0].softmax_rows(SumOrder::Sorted), 15), &[a.clone()]);
    assert_grad(
        |g, v| readout(g, v[0].layer_norm(v[1], v[2], 1e-5), 16),
        &[a.clone(), gm, bt],
    );
    assert_grad(|g, v| readout(g, v[0].l2_normalize_rows(1e-12), 17), &[a.clone()]);
    assert_grad(|_, v| v[0].cross_entropy_rows(&[0, 5, 2, 2]), &[a]);
}

#[test]
fn structural_ops() {
    let a = rnd(&[4, 6], 11);
    let b = rnd(&[4, 2], 12);
    let c = rnd(&[3, 6], 13);
    assert_grad(|g, v| readout(g, v[0].slice_cols(1, 4), 18), &[a.clone()]);
    assert_grad(|g, v| readout(g, Var::concat_cols(&[v[0], v[1]]), 19), &[a.clone(), b]);
    assert_grad(|g, v| readout(g, Var::concat_rows(&[v[0], v[1]]), 20), &[a.clone(), c]);
    assert_grad(|g, v| readout(g, v[0].select_rows(&[3, 0, 3]), 21), &[a.clone()]);
    assert_grad(|g, v| readout(g, v[0].mean_rows(), 22), &[a]);
}

#[test]
fn convolution() {
    let x = rnd(&[2, 7, 6], 14);
    let w = rnd(&[3, 2 * 9], 15);
    let b = rnd(&[3], 16);
    assert_grad(|g, v| readout(g, v[0].conv2d(v[1], v[2], 3, 2, 1), 23), &[x, w, b]);
}

#[test]
fn sorted_matmul_is_permutation_invariant_bitwise() {
    let a = rnd(&[5, 6], 17);
    let b = rnd(&[6, 4], 18);
    let perm = [3, 0, 5, 1, 4, 2];
    let ap = Tensor::from_rows(
        &(0..5)
            .map(|i| perm.iter().map(|&p| a.at(i, p)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    );
    let bp = b.select_rows(&perm);
    let g = Graph::new();
    let x = g.constant(a).matmul_sorted(g.constant(b)).value();
    let y = g.constant(ap).matmul_sorted(g.constant(bp)).value();
    assert!(x.bitwise_eq(&y));
}
