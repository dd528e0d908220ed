//! Central finite-difference checks for every differentiable operation.

use autograd::{Arr, Tape, Var};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Checks d(scalar f)/d(inputs) against central differences.
fn check<F>(inputs: &[Arr], f: F, tol: f64)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let build = |vals: &[Arr]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = build(inputs);
    let grads = tape.backward(out);
    let h = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[idx] += h;
            minus[k].as_slice_mut().unwrap()[idx] -= h;
            let (tp, _, op) = build(&plus);
            let (tm, _, om) = build(&minus);
            let numeric = (tp.scalar_value(op) - tm.scalar_value(om)) / (2.0 * h);
            let a = analytic
                .map(|g| g.as_standard_layout().as_slice().unwrap()[idx])
                .unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < tol,
                "input {k} element {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let a = rand_arr(&mut r, &[3, 4]);
    let b = rand_arr(&mut r, &[3, 4]).mapv(|v| v + 2.5); // keep div well away from 0
    for op in ["add", "sub", "mul", "div"] {
        check(
            &[a.clone(), b.clone()],
            |t, v| {
                let y = match op {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    "mul" => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                };
                let y = t.square(y);
                t.sum_all(y)
            },
            1e-6,
        );
    }
}

#[test]
fn elementwise_unary() {
    let mut r = rng();
    let a = rand_arr(&mut r, &[2, 5]).mapv(|v| v + 3.0); // positive: ln/sqrt domain
    let b = rand_arr(&mut r, &[2, 5]);
    for op in ["exp", "ln", "sqrt", "square", "sigmoid", "gelu"] {
        check(
            &[a.clone()],
            |t, v| {
                let y = match op {
                    "exp" => t.exp(v[0]),
                    "ln" => t.ln(v[0]),
                    "sqrt" => t.sqrt(v[0]),
                    "square" => t.square(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    _ => t.gelu(v[0]),
                };
                t.sum_all(y)
            },
            1e-6,
        );
    }
    // relu/abs away from the kink
    check(
        &[b.mapv(|v| if v.abs() < 0.05 { 0.2 } else { v })],
        |t, v| {
            let y = t.relu(v[0]);
            t.sum_all(y)
        },
        1e-6,
    );
    check(
        &[b.mapv(|v| if v.abs() < 0.05 { -0.2 } else { v })],
        |t, v| {
            let y = t.abs(v[0]);
            t.mean_all(y)
        },
        1e-6,
    );
}

#[test]
fn broadcast_add() {
    let mut r = rng();
    let x = rand_arr(&mut r, &[2, 3, 4]);
    let p = rand_arr(&mut r, &[3, 4]);
    check(
        &[x, p],
        |t, v| {
            let y = t.add_bcast(v[0], v[1]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
}

#[test]
fn matmuls() {
    let mut r = rng();
    let a = rand_arr(&mut r, &[3, 4]);
    let b = rand_arr(&mut r, &[4, 2]);
    check(
        &[a, b],
        |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    let a = rand_arr(&mut r, &[2, 3, 4]);
    let b = rand_arr(&mut r, &[2, 4, 3]);
    check(
        &[a, b],
        |t, v| {
            let y = t.batch_matmul(v[0], v[1]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
}

#[test]
fn linear_layer() {
    let mut r = rng();
    let x = rand_arr(&mut r, &[2, 3, 4]);
    let w = rand_arr(&mut r, &[4, 5]);
    let b = rand_arr(&mut r, &[5]);
    check(
        &[x, w, b],
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
}

#[test]
fn conv_and_pooling() {
    let mut r = rng();
    let x = rand_arr(&mut r, &[2, 3, 6, 6]);
    let w = rand_arr(&mut r, &[4, 3, 3, 3]);
    let b = rand_arr(&mut r, &[4]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check(
            &[x.clone(), w.clone(), b.clone()],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                let y = t.square(y);
                t.sum_all(y)
            },
            1e-6,
        );
    }
    check(
        &[x.clone()],
        |t, v| {
            let y = t.avg_pool2(v[0]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    check(
        &[x.clone()],
        |t, v| {
            let y = t.global_avg_pool(v[0]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    check(
        &[x],
        |t, v| {
            let y = t.upsample_bilinear(v[0], 9, 5);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let x = rand_arr(&mut r, &[4, 3]);
    check(
        &[x.clone()],
        |t, v| {
            let y = t.reshape(v[0], &[2, 6]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    check(
        &[x.clone()],
        |t, v| {
            let y = t.transpose2(v[0]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    check(
        &[x.clone()],
        |t, v| {
            // repeated row index exercises gradient accumulation
            let y = t.select_rows(v[0], &[0, 2, 2, 1]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    let y2 = rand_arr(&mut r, &[2, 3]);
    check(
        &[x, y2],
        |t, v| {
            let y = t.concat(0, &[v[0], v[1]]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    let x3 = rand_arr(&mut r, &[2, 3, 4]);
    check(
        &[x3.clone()],
        |t, v| {
            let y = t.permute(v[0], &[1, 2, 0]);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    check(
        &[x3],
        |t, v| {
            let y = t.slice_axis(v[0], 1, 1, 3);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
    let v1 = rand_arr(&mut r, &[5]);
    check(
        &[v1],
        |t, v| {
            let y = t.repeat_rows(v[0], 3);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
}

#[test]
fn softmax_family() {
    let mut r = rng();
    let x = rand_arr(&mut r, &[3, 5]);
    let w = rand_arr(&mut r, &[3, 5]);
    check(
        &[x.clone(), w.clone()],
        |t, v| {
            let y = t.softmax(v[0]);
            let y = t.mul(y, v[1]);
            t.sum_all(y)
        },
        1e-6,
    );
    check(
        &[x, w],
        |t, v| {
            let y = t.log_softmax(v[0]);
            let y = t.mul(y, v[1]);
            t.sum_all(y)
        },
        1e-6,
    );
}

#[test]
fn normalization_layers() {
    let mut r = rng();
    let x = rand_arr(&mut r, &[4, 6]);
    let gamma = rand_arr(&mut r, &[6]).mapv(|v| v + 2.0);
    let beta = rand_arr(&mut r, &[6]);
    check(
        &[x.clone(), gamma.clone(), beta.clone()],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-5,
    );
    check(
        &[x.clone(), gamma.clone(), beta.clone()],
        |t, v| {
            let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-5,
    );
    let x4 = rand_arr(&mut r, &[2, 3, 4, 4]);
    let g4 = rand_arr(&mut r, &[3]).mapv(|v| v + 2.0);
    let b4 = rand_arr(&mut r, &[3]);
    check(
        &[x4.clone(), g4.clone(), b4.clone()],
        |t, v| {
            let y = t.batch_norm_train(v[0], v[1], v[2], 1e-5);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-5,
    );
    let mean = ndarray::Array1::from_vec(vec![0.1, -0.2, 0.3]);
    let var = ndarray::Array1::from_vec(vec![1.1, 0.9, 1.3]);
    check(
        &[x4, g4, b4],
        |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], mean.clone(), var.clone(), 1e-5);
            let y = t.square(y);
            t.sum_all(y)
        },
        1e-6,
    );
}

#[test]
fn detach_cuts_gradient() {
    let mut r = rng();
    let x = rand_arr(&mut r, &[3]);
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let d = tape.detach(v);
    let y = tape.square(d);
    let out = tape.sum_all(y);
    let grads = tape.backward(out);
    assert!(grads.get(v).is_none(), "gradient leaked through detach");
    assert!(grads.get(d).is_some());
}

#[test]
fn fanout_accumulates() {
    // y = x*x + x  =>  dy/dx = 2x + 1
    let mut tape = Tape::new();
    let x = tape.leaf(ndarray::arr1(&[1.5, -0.5]).into_dyn());
    let sq = tape.mul(x, x);
    let y = tape.add(sq, x);
    let s = tape.sum_all(y);
    let grads = tape.backward(s);
    let g = grads.get(x).unwrap();
    assert!((g[[0]] - 4.0).abs() < 1e-12);
    assert!((g[[1]] - 0.0).abs() < 1e-12);
}
