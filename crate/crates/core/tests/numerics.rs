use lms_fd::numerics::gradcheck::grad_check;
use lms_fd::{DiffGraph, Matrix, Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry carries its own
/// weight in the loss.
fn project(g: &mut DiffGraph, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = g.value(out).shape();
    let w = g.constant(Matrix::randn(r, c, rng));
    let prod = g.matmul_nt(out, w)?;
    let diag = g.pick_per_row(prod, &(0..r).collect::<Vec<_>>())?;
    Ok(g.sum(diag))
}

/// Grad-checks `op` on freshly drawn inputs of the given shapes for every
/// seed; returns the worst relative error.
fn check<F>(shapes: &[(usize, usize)], mut op: F) -> f64
where
    F: FnMut(&mut DiffGraph, &[Var], &mut ChaCha8Rng) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::randn(r, c, &mut rng)).collect();
        let proj_seed = rng.random::<u64>();
        let rep = grad_check(&mut params, EPS, |g, v| {
            let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
            let out = op(g, v, &mut prng)?;
            if g.value(out).shape() == (1, 1) {
                Ok(out)
            } else {
                project(g, out, &mut prng)
            }
        })
        .unwrap();
        worst = worst.max(rep.max_rel_error);
    }
    worst
}

macro_rules! op_test {
    ($name:ident, $shapes:expr, $body:expr) => {
        #[test]
        fn $name() {
            let err = check($shapes, $body);
            assert!(err < TOL, "max relative error {err:e}");
        }
    };
}

op_test!(matmul, &[(3, 4), (4, 3)], |g, v, _| g.matmul(v[0], v[1]));
op_test!(matmul_nt, &[(3, 4), (2, 4)], |g, v, _| g.matmul_nt(v[0], v[1]));
op_test!(transpose, &[(3, 4)], |g, v, _| Ok(g.transpose(v[0])));
op_test!(add, &[(3, 4), (3, 4)], |g, v, _| g.add(v[0], v[1]));
op_test!(sub, &[(3, 4), (3, 4)], |g, v, _| g.sub(v[0], v[1]));
op_test!(add_row, &[(3, 4), (1, 4)], |g, v, _| g.add_row(v[0], v[1]));
op_test!(scale, &[(3, 4)], |g, v, _| Ok(g.scale(v[0], -1.7)));
op_test!(relu, &[(3, 4)], |g, v, _| Ok(g.relu(v[0])));
op_test!(layer_norm, &[(3, 4), (1, 4), (1, 4)], |g, v, _| g
    .layer_norm(v[0], v[1], v[2]));
op_test!(softmax_rows, &[(3, 4)], |g, v, _| Ok(g.softmax_rows(v[0])));
op_test!(cross_entropy, &[(3, 4)], |g, v, _| g.cross_entropy(v[0], &[1, 3, 0], 0));
op_test!(kl_rows, &[(3, 4), (3, 4)], |g, v, _| g.kl_rows(v[0], v[1], false, None));
op_test!(kl_rows_masked, &[(3, 4), (3, 4)], |g, v, _| g.kl_rows(
    v[0],
    v[1],
    false,
    Some(&[true, false, true])
));
op_test!(sum, &[(3, 4)], |g, v, _| Ok(g.sum(v[0])));
op_test!(mean_rows, &[(3, 4)], |g, v, _| Ok(g.mean_rows(v[0])));
op_test!(gather_rows, &[(3, 4)], |g, v, _| g.gather_rows(v[0], &[2, 0, 2, 1]));
op_test!(scatter_rows, &[(3, 4)], |g, v, _| g.scatter_rows(v[0], &[4, 0, 2], 5));
op_test!(slice_rows, &[(3, 4)], |g, v, _| g.slice_rows(v[0], 1, 2));
op_test!(slice_cols, &[(3, 4)], |g, v, _| g.slice_cols(v[0], 1, 2));
op_test!(concat_rows, &[(3, 4), (2, 4)], |g, v, _| g.concat_rows(&[v[0], v[1]]));
op_test!(concat_cols, &[(3, 4), (3, 2)], |g, v, _| g.concat_cols(&[v[0], v[1]]));
op_test!(pick_per_row, &[(3, 4)], |g, v, _| g.pick_per_row(v[0], &[3, 0, 1]));
op_test!(scale_rows, &[(3, 4), (3, 1)], |g, v, _| g.scale_rows(v[0], v[1]));

#[test]
fn detached_path_contributes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = DiffGraph::new();
    let x = g.leaf(Matrix::randn(3, 4, &mut rng));
    let d = g.detach(x);
    let y = g.softmax_rows(d);
    let s = g.sum(y);
    let direct = g.sum(x);
    let total = g.add(s, direct).unwrap();
    g.backward(total);
    // Only the undetached sum reaches x.
    assert!(g.grad(x).data().iter().all(|&v| v == 1.0));
}

#[test]
fn matmul_is_associative() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n, p) = (
            rng.random_range(1..8),
            rng.random_range(1..8),
            rng.random_range(1..8),
            rng.random_range(1..8),
        );
        let a = Matrix::randn(m, k, &mut rng);
        let b = Matrix::randn(k, n, &mut rng);
        let c = Matrix::randn(n, p, &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.max_abs().max(right.max_abs()).max(1e-300);
        assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-10);
    }
}
