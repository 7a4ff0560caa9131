//! Finite-difference verification of every tape op's backward rule. Each op
//! is checked over many random shapes against central differences; relative
//! error (denominator floored at 1) must stay below 1e-6 at h = 1e-5.

use pga_core::numcheck::{central_diff, max_rel_err};
use pga_core::tensor::{RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad()
}

/// Builds the graph via `build`, then checks the analytic gradient of every
/// input against central differences of the rebuilt loss.
fn check_gradients<F>(label: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    assert_eq!(tape.value(loss).len(), 1, "{label}: loss must be scalar");
    let grads = tape.backward_retained(loss).unwrap();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("{label}: input {i} has no gradient"));
        let fd = central_diff(
            |probe| {
                let mut modified = inputs.to_vec();
                modified[i] = Tensor::new(input.shape().to_vec(), probe.to_vec()).unwrap();
                let (t, _, l) = eval(&modified);
                t.value(l)[0]
            },
            input.data(),
            H,
        );
        let err = max_rel_err(analytic, &fd);
        assert!(
            err < TOL,
            "{label}: input {i} gradient off by {err:.3e} (shape {:?})",
            input.shape()
        );
    }
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0;
    while checked < 20 {
        let n = rng.gen_range(1..3);
        let cin = rng.gen_range(1..3);
        let cout = rng.gen_range(1..3);
        let k = [1, 2, 3][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..3usize);
        let d = rng.gen_range(k..6);
        let h = rng.gen_range(k..6);
        let w = rng.gen_range(k..6);
        let x = rand_tensor(&mut rng, &[n, cin, d, h, w]);
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        let mut probe_tape = Tape::new();
        let (px, pw, pb) = (
            probe_tape.leaf(&x),
            probe_tape.leaf(&wt),
            probe_tape.leaf(&b),
        );
        let Ok(out) = probe_tape.conv3d(px, pw, Some(pb), stride, padding) else {
            continue;
        };
        let target = rand_tensor(&mut rng, probe_tape.shape(out));
        check_gradients(
            &format!("conv3d k={k} s={stride} p={padding}"),
            &[x, wt, b, target],
            |tape, v| {
                let y = tape.conv3d(v[0], v[1], Some(v[2]), stride, padding).unwrap();
                tape.mse_loss(y, v[3]).unwrap()
            },
        );
        checked += 1;
    }
}

#[test]
fn relu_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..20 {
        let len = rng.gen_range(1..40);
        // Keep inputs away from the kink so the finite difference is valid.
        let data: Vec<f64> = (0..len)
            .map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::new(vec![len], data).unwrap().with_requires_grad();
        let target = rand_tensor(&mut rng, &[len]);
        check_gradients("relu", &[x, target], |tape, v| {
            let y = tape.relu(v[0]);
            tape.mse_loss(y, v[1]).unwrap()
        });
    }
}

#[test]
fn batch_norm_training_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..20 {
        let n = rng.gen_range(2..4);
        let c = rng.gen_range(1..4);
        let d = rng.gen_range(1..4);
        let h = rng.gen_range(1..4);
        let w = rng.gen_range(1..4);
        let x = rand_tensor(&mut rng, &[n, c, d, h, w]);
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        let target = rand_tensor(&mut rng, &[n, c, d, h, w]);
        check_gradients("batch_norm train", &[x, gamma, beta, target], |tape, v| {
            let mut running = RunningStats::new(tape.shape(v[0])[1]);
            let y = tape
                .batch_norm(v[0], v[1], v[2], &mut running, true, 1e-5, 0.1)
                .unwrap();
            tape.mse_loss(y, v[3]).unwrap()
        });
    }
}

#[test]
fn batch_norm_eval_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..20 {
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..4);
        let s = rng.gen_range(1..4);
        let mut stats = RunningStats::new(c);
        for m in stats.mean.iter_mut() {
            *m = rng.gen_range(-0.5..0.5);
        }
        for v in stats.var.iter_mut() {
            *v = rng.gen_range(0.5..2.0);
        }
        stats.count = 1;
        let x = rand_tensor(&mut rng, &[n, c, s, 1, 1]);
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        let target = rand_tensor(&mut rng, &[n, c, s, 1, 1]);
        check_gradients("batch_norm eval", &[x, gamma, beta, target], |tape, v| {
            let mut running = stats.clone();
            let y = tape
                .batch_norm(v[0], v[1], v[2], &mut running, false, 1e-5, 0.1)
                .unwrap();
            tape.mse_loss(y, v[3]).unwrap()
        });
    }
}

#[test]
fn global_avg_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..20 {
        let n = rng.gen_range(1..4);
        let c = rng.gen_range(1..4);
        let d = rng.gen_range(1..4);
        let h = rng.gen_range(1..4);
        let w = rng.gen_range(1..4);
        let x = rand_tensor(&mut rng, &[n, c, d, h, w]);
        let target = rand_tensor(&mut rng, &[n, c]);
        check_gradients("global_avg_pool", &[x, target], |tape, v| {
            let y = tape.global_avg_pool(v[0]).unwrap();
            tape.mse_loss(y, v[1]).unwrap()
        });
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..20 {
        let n = rng.gen_range(1..5);
        let f = rng.gen_range(1..6);
        let o = rng.gen_range(1..4);
        let x = rand_tensor(&mut rng, &[n, f]);
        let w = rand_tensor(&mut rng, &[o, f]);
        let b = rand_tensor(&mut rng, &[o]);
        let target = rand_tensor(&mut rng, &[n, o]);
        check_gradients("linear", &[x, w, b, target], |tape, v| {
            let y = tape.linear(v[0], v[1], v[2]).unwrap();
            tape.mse_loss(y, v[3]).unwrap()
        });
    }
}

#[test]
fn add_and_mse_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..20 {
        let len = rng.gen_range(1..30);
        let a = rand_tensor(&mut rng, &[len]);
        let b = rand_tensor(&mut rng, &[len]);
        let target = rand_tensor(&mut rng, &[len]);
        check_gradients("add+mse", &[a, b, target], |tape, v| {
            let y = tape.add(v[0], v[1]).unwrap();
            tape.mse_loss(y, v[2]).unwrap()
        });
    }
}

#[test]
fn gradient_of_summed_losses_equals_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for _ in 0..10 {
        let len = rng.gen_range(1..20);
        let x = rand_tensor(&mut rng, &[len]);
        let t1 = rand_tensor(&mut rng, &[len]);
        let t2 = rand_tensor(&mut rng, &[len]);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let vt1 = tape.leaf(&t1);
        let vt2 = tape.leaf(&t2);
        let r = tape.relu(vx);
        let l1 = tape.mse_loss(r, vt1).unwrap();
        let l2 = tape.mse_loss(r, vt2).unwrap();
        let total = tape.add(l1, l2).unwrap();
        let g_total = tape.backward_retained(total).unwrap();
        let g1 = tape.backward_retained(l1).unwrap();
        let g2 = tape.backward_retained(l2).unwrap();
        let summed: Vec<f64> = g1
            .get(vx)
            .unwrap()
            .iter()
            .zip(g2.get(vx).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        assert!(max_rel_err(g_total.get(vx).unwrap(), &summed) < 1e-12);
    }
}

#[test]
fn residual_network_chain_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let x = rand_tensor(&mut rng, &[2, 1, 4, 4, 4]);
    let w1 = rand_tensor(&mut rng, &[2, 1, 3, 3, 3]);
    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    let w2 = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
    let wl = rand_tensor(&mut rng, &[1, 2]);
    let bl = rand_tensor(&mut rng, &[1]);
    let target = rand_tensor(&mut rng, &[2, 1]);
    check_gradients(
        "conv-bn-relu-conv-add-gap-linear chain",
        &[x, w1, gamma, beta, w2, wl, bl, target],
        |tape, v| {
            let c1 = tape.conv3d(v[0], v[1], None, 1, 1).unwrap();
            let mut running = RunningStats::new(2);
            let bn = tape
                .batch_norm(c1, v[2], v[3], &mut running, true, 1e-5, 0.1)
                .unwrap();
            let r1 = tape.relu(bn);
            let c2 = tape.conv3d(r1, v[4], None, 1, 1).unwrap();
            let skip = tape.add(c2, r1).unwrap();
            let pooled = tape.global_avg_pool(skip).unwrap();
            let pred = tape.linear(pooled, v[5], v[6]).unwrap();
            tape.mse_loss(pred, v[7]).unwrap()
        },
    );
}
