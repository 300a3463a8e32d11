//! Finite-difference checks for every tape primitive, plus composed-cell fixtures.

mod common;

use common::{primitive_errors, rand_tensor, TOL};
use denoise_core::tensor::{grad_check, ConvSpec, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_matches_finite_differences() {
    let errors = primitive_errors();
    for (name, worst) in &errors {
        println!("grad check {name:<20} worst rel err {worst:.2e}");
    }
    for (name, worst) in errors {
        assert!(worst <= TOL, "{name}: {worst}");
    }
}

#[test]
fn quadratic_form_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[6, 6]);
    let x = rand_tensor(&mut rng, &[1, 6]);
    let err = grad_check(
        |t, v| {
            let am = t.constant(a.clone());
            let ax = t.matmul(v, am)?;
            let q = t.mul(ax, v)?;
            Ok(t.sum(q))
        },
        &x,
        1e-4,
    )
    .unwrap();
    println!("quadratic form rel err {err:.2e}");
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn conv_kernel_one_is_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 7, 5]);
    let w = rand_tensor(&mut rng, &[1, 5, 4]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let conv = tape.conv1d(xv, wv, ConvSpec::same(1, 1)).unwrap();
    let flat = tape.constant(x.reshaped(&[21, 5]).unwrap());
    let wm = tape.constant(w.reshaped(&[5, 4]).unwrap());
    let mm = tape.matmul(flat, wm).unwrap();
    assert_eq!(tape.value(conv).data(), tape.value(mm).data());
}

#[test]
fn composed_gru_and_lstm_cells_match_hand_values() {
    // 3 hidden units, 1 input, one step from zero state with hand-picked weights.
    let x = 0.5;
    let wr = [0.2, -0.4, 0.6];
    let wz = [0.1, 0.3, -0.5];
    let wn = [0.7, -0.2, 0.4];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut wx = vec![0.0; 9];
    for u in 0..3 {
        wx[u] = wr[u];
        wx[3 + u] = wz[u];
        wx[6 + u] = wn[u];
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[1, 1], vec![x]).unwrap());
    let w = tape.constant(Tensor::new(&[1, 9], wx.clone()).unwrap());
    let h0 = tape.constant(Tensor::zeros(&[1, 3]));
    let g = tape.matmul(xv, w).unwrap();
    let r = tape.slice_last(g, 0, 3).unwrap();
    let r = tape.sigmoid(r);
    let z = tape.slice_last(g, 3, 6).unwrap();
    let z = tape.sigmoid(z);
    let n = tape.slice_last(g, 6, 9).unwrap();
    let zero = tape.constant(Tensor::zeros(&[1, 3]));
    let rn = tape.mul(r, zero).unwrap();
    let n = tape.add(n, rn).unwrap();
    let n = tape.tanh(n);
    let d = tape.sub(h0, n).unwrap();
    let zd = tape.mul(z, d).unwrap();
    let h = tape.add(n, zd).unwrap();
    for u in 0..3 {
        let n = (wn[u] * x).tanh();
        let z = sig(wz[u] * x);
        let want = (1.0 - z) * n;
        assert!((tape.value(h).data()[u] - want).abs() < 1e-15);
    }

    // LSTM: gates (i, f, g, o), zero initial cell.
    let wi = [0.3, -0.1, 0.2];
    let wg = [-0.6, 0.5, 0.9];
    let wo = [0.4, 0.4, -0.8];
    let mut wl = vec![0.0; 12];
    for u in 0..3 {
        wl[u] = wi[u];
        wl[3 + u] = 0.0;
        wl[6 + u] = wg[u];
        wl[9 + u] = wo[u];
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[1, 1], vec![x]).unwrap());
    let w = tape.constant(Tensor::new(&[1, 12], wl).unwrap());
    let g = tape.matmul(xv, w).unwrap();
    let gi = tape.slice_last(g, 0, 3).unwrap();
    let i = tape.sigmoid(gi);
    let gg = tape.slice_last(g, 6, 9).unwrap();
    let gg = tape.tanh(gg);
    let go = tape.slice_last(g, 9, 12).unwrap();
    let o = tape.sigmoid(go);
    let c = tape.mul(i, gg).unwrap();
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc).unwrap();
    for u in 0..3 {
        let c = sig(wi[u] * x) * (wg[u] * x).tanh();
        let want = sig(wo[u] * x) * c.tanh();
        assert!((tape.value(h).data()[u] - want).abs() < 1e-15);
    }
}
