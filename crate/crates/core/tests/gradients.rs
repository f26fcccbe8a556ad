use lmc_core::cell::{CellConfig, Functional, ModuleCell, Structural};
use lmc_core::tensor::gradcheck::grad_check;
use lmc_core::tensor::{linear, BatchNorm, Tensor};
use lmc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn konst(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(rand_vec(rng, n), shape).unwrap()
}

/// Random projection to a scalar so no output direction is privileged.
fn reduce(y: Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = konst(&mut rng, y.shape());
    Ok(y.mul(&w)?.sum())
}

fn check(name: &str, shape: &[usize], seed: u64, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_vec(&mut rng, shape.iter().product());
    let r = grad_check(|t: &Tensor<f64>| reduce(f(t)?, seed), &x, shape, H, TOL);
    assert!(r.passed, "{name} seed {seed}: {r:?}");
}

#[test]
fn elementwise_and_reduction_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let other = konst(&mut rng, &[3, 4]);
        check("add", &[3, 4], seed, |t| t.add(&other));
        check("sub", &[3, 4], seed, |t| other.sub(t));
        check("mul", &[3, 4], seed, |t| t.mul(&other));
        check("mul self", &[3, 4], seed, |t| t.mul(t));
        check("add_scalar", &[3, 4], seed, |t| Ok(t.add_scalar(0.7)));
        check("mul_scalar", &[3, 4], seed, |t| Ok(t.mul_scalar(-1.3)));
        check("neg", &[3, 4], seed, |t| Ok(t.neg()));
        check("relu", &[3, 4], seed, |t| Ok(t.relu()));
        check("sigmoid", &[3, 4], seed, |t| Ok(t.sigmoid()));
        check("exp", &[3, 4], seed, |t| Ok(t.exp()));
        check("log1p", &[3, 4], seed, |t| Ok(t.square().log1p()));
        check("square", &[3, 4], seed, |t| Ok(t.square()));
        check("sum", &[3, 4], seed, |t| Ok(t.sum()));
        check("mean", &[3, 4], seed, |t| Ok(t.mean()));
        check("sum_per_sample", &[3, 2, 2], seed, |t| t.sum_per_sample());
        check("sum_all", &[3, 4], seed, |t| Tensor::sum_all(&[t.sum(), t.square().sum()]));
    }
}

#[test]
fn shape_and_linear_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let w = konst(&mut rng, &[4, 3]);
        let b = konst(&mut rng, &[3]);
        let rows = konst(&mut rng, &[5]);
        let x = konst(&mut rng, &[5, 4]);
        check("matmul lhs", &[5, 4], seed, |t| t.matmul(&w));
        check("matmul rhs", &[4, 3], seed, |t| x.matmul(t));
        check("add_bias", &[3], seed, |t| x.matmul(&w)?.add_bias(t));
        check("linear", &[5, 4], seed, |t| linear(t, &w, &b));
        check("reshape", &[2, 6], seed, |t| t.reshape(&[3, 4]));
        check("flatten", &[2, 2, 3], seed, |t| t.flatten());
        check("scale_rows x", &[5, 2, 2], seed, |t| t.scale_rows(&rows));
        let z = konst(&mut rng, &[5, 2]);
        check("scale_rows w", &[5], seed, |t| z.scale_rows(t));
        check("softmax_t", &[3, 4], seed, |t| t.softmax_t(0.5));
        check("cross_entropy", &[4, 3], seed, |t| t.cross_entropy(&[0, 2, 1, 2], false));
        check("cross_entropy mean", &[4, 3], seed, |t| t.cross_entropy(&[1, 1, 0, 2], true));
        check("l2_normalize_rows", &[3, 4], seed, |t| t.l2_normalize_rows());
        check("slice_cols", &[3, 6], seed, |t| t.slice_cols(1, 4));
        check("concat_cols", &[3, 4], seed, |t| t.slice_cols(0, 2)?.concat_cols(&t.square()));
    }
}

#[test]
fn spatial_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let k = konst(&mut rng, &[3, 2, 3, 3]);
        let kb = konst(&mut rng, &[3]);
        let x = konst(&mut rng, &[2, 2, 4, 4]);
        check("conv2d pad1 x", &[2, 2, 4, 4], seed, |t| t.conv2d(&k, Some(&kb), 1));
        check("conv2d pad0 x", &[2, 2, 4, 4], seed, |t| t.conv2d(&k, None, 0));
        check("conv2d kernel", &[3, 2, 3, 3], seed, |t| x.conv2d(t, Some(&kb), 1));
        check("conv2d bias", &[3], seed, |t| x.conv2d(&k, Some(t), 1));
        let up = konst(&mut rng, &[2, 3, 2, 2]);
        let ub = konst(&mut rng, &[3]);
        check("conv_transpose x", &[2, 2, 3, 3], seed, |t| t.conv_transpose2x2(&up, &ub));
        check("conv_transpose kernel", &[2, 3, 2, 2], seed, |t| x.conv_transpose2x2(t, &ub));
        check("conv_transpose bias", &[3], seed, |t| x.conv_transpose2x2(&up, t));
        check("maxpool2", &[2, 2, 4, 4], seed, |t| t.maxpool2());
    }
}

#[test]
fn batch_norm_in_training_mode() {
    for seed in 0..20 {
        check("batchnorm x", &[4, 3, 2, 2], seed, |t| BatchNorm::new(3, 1e-5, 0.1).forward(t, true));
        check("batchnorm 2d", &[6, 3], seed, |t| BatchNorm::new(3, 1e-5, 0.1).forward(t, true));
    }
}

fn cell(seed: u64) -> ModuleCell<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModuleCell::conv([2, 4, 4], 3, 0, &CellConfig::default(), &mut rng).unwrap()
}

/// Summed structural loss plus a projection of the functional output.
fn layer_objective(c: &mut ModuleCell<f64>, x: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let f = c.run_functional(x, true)?;
    let s = c.structural_loss(&f, x, true)?.sum();
    reduce(f, seed)?.add(&s)
}

#[test]
fn full_layer_gradients_wrt_input_and_every_parameter() {
    for seed in 0..20 {
        let template = cell(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
        let xv = rand_vec(&mut rng, 3 * 2 * 4 * 4).iter().map(|v| 0.5 + 0.5 * v).collect::<Vec<_>>();
        let x = Tensor::new(xv.clone(), &[3, 2, 4, 4]).unwrap();

        let r = grad_check(|t: &Tensor<f64>| layer_objective(&mut template.duplicate(), t, seed), &xv, &[3, 2, 4, 4], H, TOL);
        assert!(r.passed, "input seed {seed}: {r:?}");

        let n_params = template.all_params().len();
        for pi in 0..n_params {
            let p0 = template.all_params()[pi].clone();
            let with = |t: &Tensor<f64>| {
                let mut c = template.duplicate();
                let slot = {
                    let mut v: Vec<&mut Tensor<f64>> = Vec::new();
                    if let Functional::Conv(b) = &mut c.functional {
                        v.extend([&mut b.weight, &mut b.bias, &mut b.bn.gamma, &mut b.bn.beta]);
                    }
                    if let Structural::Autoencoder(d) = &mut c.structural {
                        v.extend([&mut d.up_weight, &mut d.up_bias, &mut d.bn.gamma, &mut d.bn.beta, &mut d.out_weight, &mut d.out_bias]);
                    }
                    v.into_iter().nth(pi).expect("parameter slot")
                };
                *slot = t.clone();
                layer_objective(&mut c, &x, seed)
            };
            let r = grad_check(with, &p0.to_vec(), p0.shape(), H, TOL);
            assert!(r.passed, "param {pi} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn head_cell_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        let head = ModuleCell::<f64>::head(6, 3, 0, &CellConfig::default(), &mut rng).unwrap();
        let xv = rand_vec(&mut rng, 4 * 6);
        let r = grad_check(
            |t: &Tensor<f64>| {
                let mut c = head.duplicate();
                let f = c.run_functional(t, true)?;
                let s = c.structural_loss(&f, t, true)?.sum();
                f.cross_entropy(&[0, 1, 2, 0], false)?.add(&s)
            },
            &xv,
            &[4, 6],
            H,
            TOL,
        );
        assert!(r.passed, "seed {seed}: {r:?}");
    }
}
