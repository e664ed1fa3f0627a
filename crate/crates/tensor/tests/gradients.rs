use mupad_tensor::check::grad_check;
use mupad_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces an arbitrary tensor to a scalar with a fixed random projection so that
/// every output entry influences the loss with a distinct weight.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabcdef));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

fn check_case<F>(name: &str, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let r = grad_check(&inputs, H, |t, v| Ok(f(t, v))).unwrap();
    assert!(
        r.max_rel_err < TOL,
        "{name}: max relative error {} (abs {})",
        r.max_rel_err,
        r.max_abs_err
    );
}

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let c = Tensor::randn(&[3, 4], 1.0, &mut r);
        let row = Tensor::randn(&[4], 1.0, &mut r);
        let col = Tensor::randn(&[3, 1], 1.0, &mut r);

        check_case("add_broadcast", vec![a.clone(), row.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, seed)
        });
        check_case("sub_broadcast", vec![a.clone(), col.clone()], |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            project(t, y, seed)
        });
        check_case("mul", vec![a.clone(), c.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, seed)
        });
        check_case("mul_broadcast", vec![a.clone(), col.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, seed)
        });
        check_case("scale_offset", vec![a.clone()], |t, v| {
            let y = t.scale(v[0], -1.7).unwrap();
            let y = t.add_scalar(y, 0.3).unwrap();
            project(t, y, seed)
        });
        check_case("matmul", vec![a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, seed)
        });

        let q = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let k = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let kt = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
        let qt = Tensor::randn(&[2, 4, 3], 1.0, &mut r);
        check_case("bmm_nt", vec![q.clone(), k.clone()], |t, v| {
            let y = t.bmm(v[0], v[1], false, true).unwrap();
            project(t, y, seed)
        });
        check_case("bmm_nn", vec![q.clone(), kt.clone()], |t, v| {
            let y = t.bmm(v[0], v[1], false, false).unwrap();
            project(t, y, seed)
        });
        check_case("bmm_tn", vec![qt.clone(), kt.clone()], |t, v| {
            let y = t.bmm(v[0], v[1], true, false).unwrap();
            project(t, y, seed)
        });
        check_case("bmm_tt", vec![qt.clone(), k.clone()], |t, v| {
            let y = t.bmm(v[0], v[1], true, true).unwrap();
            project(t, y, seed)
        });

        check_case("softmax", vec![a.clone()], |t, v| {
            let y = t.softmax(v[0]).unwrap();
            project(t, y, seed)
        });
        check_case("layer_norm", vec![a.clone()], |t, v| {
            let y = t.layer_norm(v[0], 1e-5).unwrap();
            project(t, y, seed)
        });
        check_case("gelu", vec![a.clone()], |t, v| {
            let y = t.gelu(v[0]).unwrap();
            project(t, y, seed)
        });
        check_case("silu", vec![a.clone()], |t, v| {
            let y = t.silu(v[0]).unwrap();
            project(t, y, seed)
        });
        check_case("tanh", vec![a.clone()], |t, v| {
            let y = t.tanh(v[0]).unwrap();
            project(t, y, seed)
        });

        let img = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
        let ker = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        check_case("conv2d_s1p1", vec![img.clone(), ker.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, 1).unwrap();
            project(t, y, seed)
        });
        check_case("conv2d_s2p0", vec![img.clone(), ker.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 0).unwrap();
            project(t, y, seed)
        });

        let x3 = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        check_case("reshape_permute", vec![x3.clone()], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1]).unwrap();
            let y = t.reshape(y, &[4, 6]).unwrap();
            project(t, y, seed)
        });
        check_case("concat_slice", vec![x3.clone(), a.clone()], |t, v| {
            let b = t.reshape(v[1], &[1, 3, 4]).unwrap();
            let y = t.concat(&[v[0], b], 0).unwrap();
            let y = t.slice(y, 1, 1, 2).unwrap();
            project(t, y, seed)
        });
        check_case("mean", vec![a.clone()], |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.mean(sq).unwrap()
        });
        check_case("mse", vec![a.clone(), c.clone()], |t, v| t.mse(v[0], v[1]).unwrap());

        let table = Tensor::randn(&[5, 3], 1.0, &mut r);
        check_case("gather_rows", vec![table], |t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap();
            project(t, y, seed)
        });
    }
}

#[test]
fn three_layer_perceptron_matches_finite_differences() {
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let x = Tensor::randn(&[4, 5], 1.0, &mut r);
        let w1 = Tensor::randn(&[5, 6], 0.5, &mut r);
        let b1 = Tensor::randn(&[6], 0.1, &mut r);
        let w2 = Tensor::randn(&[6, 6], 0.5, &mut r);
        let b2 = Tensor::randn(&[6], 0.1, &mut r);
        let w3 = Tensor::randn(&[6, 2], 0.5, &mut r);
        let target = Tensor::randn(&[4, 2], 1.0, &mut r);
        let res = grad_check(&[x, w1, b1, w2, b2, w3], H, |t, v| {
            let h = t.linear(v[0], v[1], Some(v[2]))?;
            let h = t.gelu(h)?;
            let h = t.linear(h, v[3], Some(v[4]))?;
            let h = t.tanh(h)?;
            let y = t.matmul(h, v[5])?;
            let tg = t.constant(target.clone());
            t.mse(y, tg)
        })
        .unwrap();
        assert!(res.max_rel_err < TOL, "seed {seed}: {}", res.max_rel_err);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let got = tape.value(c);
    for i in 0..3 {
        for j in 0..2 {
            let mut want = 0.0;
            for k in 0..4 {
                want += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            assert!((got.data()[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut r = rng(99);
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let mut t = Tape::new();
        let (vx, vw) = (t.param(x), t.param(w));
        let y = t.conv2d(vx, vw, 2, 1).unwrap();
        let y = t.reshape(y, &[2, 4, 9]).unwrap();
        let y = t.softmax(y).unwrap();
        let y = t.layer_norm(y, 1e-5).unwrap();
        let l = t.mean(y).unwrap();
        let l2 = t.mul(l, l).unwrap();
        let g = t.backward(l2).unwrap();
        (t.value(y).clone(), g.get(vw).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 1..40), d in 1usize..8) {
        let rows = data.len() / d;
        prop_assume!(rows >= 1);
        let x = Tensor::new(&[rows, d], data[..rows * d].to_vec()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v).unwrap();
        for row in t.value(s).data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_centered(data in prop::collection::vec(-100.0f64..100.0, 2..40), d in 2usize..8) {
        let rows = data.len() / d;
        prop_assume!(rows >= 1);
        let x = Tensor::new(&[rows, d], data[..rows * d].to_vec()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.layer_norm(v, 1e-5).unwrap();
        for row in t.value(y).data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() / d as f64).abs() < 1e-10);
        }
    }
}
