//! Finite-difference checks for every differentiable tape operation on
//! random small shapes.

mod common;

use common::*;

use freqscreen::tensor::{check_gradients, Tape, Tensor, TensorId};

fn check1(name: &str, shape: &[usize], seed: u64, f: impl Fn(&mut Tape, TensorId) -> TensorId) {
    let mut r = rng(seed);
    let x = random_tensor(shape, &mut r);
    let wgt = random_tensor(shape_of_output(&f, &x), &mut r);
    let rep = check_gradients(
        move |tape, ids| {
            let y = f(tape, ids[0]);
            let w = tape.constant(&wgt);
            let p = tape.mul(y, w);
            tape.sum_all(p)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{name}: rel err {}", rep.max_rel_err);
}

fn shape_of_output(
    f: &impl Fn(&mut Tape, TensorId) -> TensorId,
    x: &Tensor,
) -> &'static [usize] {
    // Probe once to learn the output shape; leaked as a static slice so the
    // closure above can capture a weight tensor of matching shape.
    let mut tape = Tape::new();
    let id = tape.constant(x);
    let y = f(&mut tape, id);
    Box::leak(tape.shape(y).to_vec().into_boxed_slice())
}

#[test]
fn unary_ops() {
    check1("tanh", &[3, 4], 30, |t, x| t.tanh(x));
    check1("sigmoid", &[3, 4], 31, |t, x| t.sigmoid(x));
    check1("silu", &[3, 4], 32, |t, x| t.silu(x));
    check1("exp", &[2, 3], 33, |t, x| t.exp(x));
    check1("square", &[2, 3], 34, |t, x| t.square(x));
    check1("softplus", &[2, 3], 35, |t, x| t.softplus(x));
    check1("mul_scalar", &[2, 3], 36, |t, x| t.mul_scalar(x, -2.5));
    check1("add_scalar", &[2, 3], 37, |t, x| t.add_scalar(x, 1.5));
    check1("reshape", &[2, 6], 38, |t, x| t.reshape(x, &[3, 4]));
    check1("transpose", &[3, 4], 39, |t, x| t.transpose2d(x));
    check1("softmax_rows", &[3, 5], 40, |t, x| t.softmax_rows(x));
}

#[test]
fn positive_domain_unary_ops() {
    // ln and sqrt need inputs bounded away from zero.
    let mut r = rng(41);
    let mut x = random_tensor(&[2, 4], &mut r);
    for v in x.data_mut() {
        *v = 0.5 + v.abs();
    }
    for (name, f) in [
        ("ln", (|t: &mut Tape, x| t.ln(x)) as fn(&mut Tape, TensorId) -> TensorId),
        ("sqrt", |t, x| t.sqrt(x)),
    ] {
        let wgt = random_tensor(&[2, 4], &mut r);
        let xin = x.clone();
        let rep = check_gradients(
            move |tape, ids| {
                let y = f(tape, ids[0]);
                let w = tape.constant(&wgt);
                let p = tape.mul(y, w);
                tape.sum_all(p)
            },
            &[xin],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{name}: rel err {}", rep.max_rel_err);
    }
}

#[test]
fn clamp_ops_away_from_kinks() {
    // Shift data away from the clamp thresholds so finite differences
    // do not straddle a kink.
    let mut r = rng(42);
    let mut x = random_tensor(&[3, 3], &mut r);
    for v in x.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2;
        }
    }
    let wgt = random_tensor(&[3, 3], &mut r);
    let w2 = wgt.clone();
    let rep = check_gradients(
        move |tape, ids| {
            let y = tape.clamp_min(ids[0], 0.0);
            let w = tape.constant(&wgt);
            let p = tape.mul(y, w);
            tape.sum_all(p)
        },
        &[x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "clamp_min: {}", rep.max_rel_err);

    let rep = check_gradients(
        move |tape, ids| {
            let y = tape.clamp(ids[0], -0.5, 0.5);
            let w = tape.constant(&w2);
            let p = tape.mul(y, w);
            tape.sum_all(p)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "clamp: {}", rep.max_rel_err);
}

#[test]
fn binary_ops() {
    let mut r = rng(43);
    let a = random_tensor(&[3, 4], &mut r);
    let b = {
        let mut t = random_tensor(&[3, 4], &mut r);
        for v in t.data_mut() {
            *v = 1.0 + v.abs(); // keep division well conditioned
        }
        t
    };
    for (name, f) in [
        ("add", (|t: &mut Tape, x, y| t.add(x, y)) as fn(&mut Tape, TensorId, TensorId) -> TensorId),
        ("sub", |t, x, y| t.sub(x, y)),
        ("mul", |t, x, y| t.mul(x, y)),
    ] {
        let wgt = random_tensor(&[3, 4], &mut r);
        let rep = check_gradients(
            move |tape, ids| {
                let y = f(tape, ids[0], ids[1]);
                let w = tape.constant(&wgt);
                let p = tape.mul(y, w);
                tape.sum_all(p)
            },
            &[a.clone(), b.clone()],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{name}: rel err {}", rep.max_rel_err);
    }
}

#[test]
fn matmul_and_reductions() {
    let mut r = rng(44);
    let a = random_tensor(&[3, 4], &mut r);
    let b = random_tensor(&[4, 2], &mut r);
    let rep = check_gradients(
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1]);
            let sq = tape.square(c);
            tape.sum_all(sq)
        },
        &[a.clone(), b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "matmul: {}", rep.max_rel_err);

    check1("sum_axis1", &[3, 4], 45, |t, x| t.sum_axis1(x));
    check1("mean_axis1", &[3, 4], 46, |t, x| t.mean_axis1(x));

    let rep = check_gradients(
        |tape, ids| tape.mean_all(ids[0]),
        &[a],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "mean_all: {}", rep.max_rel_err);
}

#[test]
fn column_broadcast_ops() {
    let mut r = rng(47);
    let a = random_tensor(&[3, 5], &mut r);
    let v = {
        let mut t = random_tensor(&[3], &mut r);
        for x in t.data_mut() {
            *x = 1.0 + x.abs();
        }
        t
    };
    for (name, f) in [
        ("add_col", (|t: &mut Tape, x, y| t.add_col(x, y)) as fn(&mut Tape, TensorId, TensorId) -> TensorId),
        ("sub_col", |t, x, y| t.sub_col(x, y)),
        ("mul_col", |t, x, y| t.mul_col(x, y)),
        ("div_col", |t, x, y| t.div_col(x, y)),
    ] {
        let wgt = random_tensor(&[3, 5], &mut r);
        let rep = check_gradients(
            move |tape, ids| {
                let y = f(tape, ids[0], ids[1]);
                let w = tape.constant(&wgt);
                let p = tape.mul(y, w);
                tape.sum_all(p)
            },
            &[a.clone(), v.clone()],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{name}: rel err {}", rep.max_rel_err);
    }
}

#[test]
fn concat_gather_scatter() {
    let mut r = rng(48);
    let a = random_tensor(&[4], &mut r);
    let b = random_tensor(&[4], &mut r);
    let rep = check_gradients(
        |tape, ids| {
            let m = tape.concat_rows(&[ids[0], ids[1]]);
            let sq = tape.square(m);
            tape.sum_all(sq)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "concat_rows: {}", rep.max_rel_err);

    let x = random_tensor(&[2, 4, 4], &mut r);
    let vals = random_tensor(&[2, 4], &mut r);
    let rep = check_gradients(
        |tape, ids| {
            let g = tape.gather_region(ids[0], &[1, 2], &[1, 2]);
            let sq = tape.square(g);
            tape.sum_all(sq)
        },
        &[x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "gather_region: {}", rep.max_rel_err);

    let rep = check_gradients(
        |tape, ids| {
            let s = tape.scatter_region(ids[0], ids[1], &[0, 3], &[1, 2]);
            let sq = tape.square(s);
            tape.sum_all(sq)
        },
        &[x, vals],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "scatter_region: {}", rep.max_rel_err);
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(49);
    let x = random_tensor(&[2, 5, 5], &mut r);
    let w = random_tensor(&[3, 2, 3, 3], &mut r);
    let b = random_tensor(&[3], &mut r);
    let rep = check_gradients(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1);
            let sq = tape.square(y);
            tape.sum_all(sq)
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "conv2d: {}", rep.max_rel_err);
}

#[test]
fn conv2d_output_shape_halves() {
    let mut r = rng(50);
    for (h, w) in [(64, 64), (7, 9), (4, 4), (5, 5)] {
        let x = random_tensor(&[1, h, w], &mut r);
        let wt = random_tensor(&[2, 1, 3, 3], &mut r);
        let b = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.constant(&x), tape.constant(&wt), tape.constant(&b));
        let y = tape.conv2d(xi, wi, bi, 2, 1);
        assert_eq!(tape.shape(y), &[2, h.div_ceil(2), w.div_ceil(2)]);
    }
}
