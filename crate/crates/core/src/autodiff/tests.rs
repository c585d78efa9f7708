use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::quant::{fake_quantize_token, quantize_weight, TokenScheme, WeightQuantSpec};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_grad(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let c = gradcheck(x, 1e-2, f).unwrap();
    let err = c.rel_err();
    assert!(err < 1e-3, "{name}: relative error {err}");
}

#[test]
fn matmul_gradients() {
    let mut r = rng(1);
    let b = Tensor::randn(4, 3, 1.0, &mut r);
    let a = Tensor::randn(5, 4, 1.0, &mut r);
    assert_grad("matmul lhs", &a, |g, x| {
        let bv = g.constant(b.clone());
        g.matmul(x, bv)
    });
    assert_grad("matmul rhs", &b, |g, x| {
        let av = g.constant(a.clone());
        g.matmul(av, x)
    });
    let c = Tensor::randn(6, 4, 1.0, &mut r);
    assert_grad("matmul_nt rhs", &c, |g, x| {
        let av = g.constant(a.clone());
        g.matmul_nt(av, x)
    });
    assert_grad("matmul_nt lhs", &a, |g, x| {
        let cv = g.constant(c.clone());
        g.matmul_nt(x, cv)
    });
    assert_grad("transpose", &a, |g, x| Ok(g.transpose(x)));
}

#[test]
fn broadcast_arithmetic_gradients() {
    let mut r = rng(2);
    let x = Tensor::randn(4, 3, 1.0, &mut r);
    let row = Tensor::uniform(1, 3, 0.5, 2.0, &mut r);
    let col = Tensor::uniform(4, 1, 0.5, 2.0, &mut r);
    for (name, b) in [("row", row), ("col", col), ("scalar", Tensor::scalar(1.7))] {
        let bb = b.clone();
        let xc = x.clone();
        assert_grad(&format!("div by {name}"), &b, move |g, v| {
            let xv = g.constant(xc.clone());
            let q = g.div(xv, v)?;
            let m = g.mul(q, v)?;
            let s = g.sub(m, v)?;
            g.add(s, q)
        });
        assert_grad(&format!("lhs with {name}"), &x, move |g, v| {
            let bv = g.constant(bb.clone());
            let q = g.div(v, bv)?;
            g.mul(q, v)
        });
    }
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(3);
    let x = Tensor::randn(3, 5, 1.5, &mut r);
    assert_grad("sigmoid", &x, |g, v| Ok(g.sigmoid(v)));
    assert_grad("silu", &x, |g, v| g.silu(v));
    assert_grad("scale", &x, |g, v| Ok(g.scale(v, -2.5)));
    assert_grad("square", &x, |g, v| Ok(g.square(v)));
    assert_grad("mean_rows", &x, |g, v| Ok(g.mean_rows(v)));
    assert_grad("mean_all", &x, |g, v| Ok(g.mean_all(v)));
    // Well away from zero and the clamp bounds.
    let y = x.map(|v| if v.abs() < 0.1 { 0.5 } else { v });
    assert_grad("abs", &y, |g, v| Ok(g.abs(v)));
    let z = x.map(|v| if (v.abs() - 1.0).abs() < 0.05 { 0.0 } else { v });
    assert_grad("clamp", &z, |g, v| Ok(g.clamp(v, -1.0, 1.0)));
}

#[test]
fn structural_gradients() {
    let mut r = rng(4);
    let x = Tensor::randn(3, 6, 1.0, &mut r);
    assert_grad("slice", &x, |g, v| g.slice_cols(v, 2, 3));
    assert_grad("concat cols", &x, |g, v| {
        let a = g.slice_cols(v, 0, 2)?;
        let b = g.slice_cols(v, 2, 4)?;
        g.concat_cols(&[b, a, b])
    });
    assert_grad("concat rows", &x, |g, v| {
        let s = g.scale(v, 2.0);
        g.concat_rows(&[v, s])
    });
    let table = Tensor::randn(5, 4, 1.0, &mut r);
    assert_grad("embedding", &table, |g, v| g.embedding(v, &[3, 0, 3, 4]));
    let distinct = Tensor::from_rows(&[vec![0.1, 0.9, -0.3], vec![2.0, -1.0, 0.5]]);
    assert_grad("max_rows", &distinct, |g, v| Ok(g.max_rows(v)));
}

#[test]
fn transformer_primitive_gradients() {
    let mut r = rng(5);
    let x = Tensor::randn(4, 8, 1.0, &mut r);
    let gain = Tensor::uniform(1, 8, 0.5, 1.5, &mut r);
    {
        let gain = gain.clone();
        assert_grad("rms_norm x", &x, move |g, v| {
            let gv = g.constant(gain.clone());
            g.rms_norm(v, gv, 1e-5)
        });
    }
    assert_grad("rms_norm gain", &gain, |g, v| {
        let xv = g.constant(x.clone());
        g.rms_norm(xv, v, 1e-5)
    });
    let spec = RopeSpec {
        start: 3,
        head_dim: 4,
        base: 10000.0,
    };
    assert_grad("rope", &x, |g, v| g.rope(v, spec));
    let scores = Tensor::randn(3, 5, 1.0, &mut r);
    assert_grad("causal softmax", &scores, |g, v| g.causal_softmax(v));
    let targets = [1usize, 7, 0, 3];
    assert_grad("cross entropy", &x, |g, v| g.cross_entropy(v, &targets));
}

#[test]
fn rope_at_position_zero_is_identity_and_inverse_undoes() {
    let mut r = rng(6);
    let x = Tensor::randn(1, 8, 1.0, &mut r);
    let spec = RopeSpec {
        start: 0,
        head_dim: 8,
        base: 10000.0,
    };
    assert_eq!(rope(&x, &spec, false).unwrap(), x);
    let y = Tensor::randn(6, 8, 1.0, &mut r);
    let spec = RopeSpec { start: 17, ..spec };
    let back = rope(&rope(&y, &spec, false).unwrap(), &spec, true).unwrap();
    assert!(back.max_abs_diff(&y) < 1e-5);
}

#[test]
fn causal_softmax_masks_exactly() {
    let x = Tensor::from_rows(&[vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]]);
    let y = causal_softmax(&x).unwrap();
    // offset 1: row 0 sees two keys, row 1 sees three.
    assert_eq!(y.get(0, 2), 0.0);
    assert!((y.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    assert!((y.row(1).iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn non_finite_inputs_name_the_op() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, f32::INFINITY]]));
    let gain = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
    let err = g.rms_norm(x, gain, 1e-5).unwrap_err();
    assert!(err.to_string().contains("rms_norm"), "{err}");
    assert!(matches!(g.silu(x), Err(Error::NonFinite { op: "silu" })));
}

#[test]
fn division_by_tiny_scale_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(2, 2, 1.0));
    let s = g.constant(Tensor::from_rows(&[vec![1.0, 1e-13]]));
    assert!(matches!(g.div(x, s), Err(Error::DegenerateScale { .. })));
}

#[test]
fn mismatched_shapes_report_both() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 2));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn constants_get_no_gradient_and_tape_is_cleared() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(1, 2, 2.0));
    let b = g.constant(Tensor::full(1, 2, 3.0));
    let p = g.mul(a, b).unwrap();
    let loss = g.sum_all(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
    assert!(grads.get(b).is_none());
    assert!(g.is_empty());
}

#[test]
fn unused_params_get_zero_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::full(1, 2, 2.0));
    let unused = g.param(Tensor::full(1, 3, 2.0));
    let loss = g.sum_all(a);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn fake_quant_forward_matches_quantizers() {
    let mut r = rng(7);
    let w = Tensor::randn(10, 3, 1.0, &mut r);
    let spec = WeightQuantSpec::new(3, 4);
    let gamma = Tensor::uniform(3, 3, 0.6, 1.0, &mut r);
    let beta = Tensor::uniform(3, 3, 0.6, 1.0, &mut r);
    let mut g = Graph::new();
    let (wv, gv, bv) = (g.constant(w.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g
        .fake_quant_weight(wv, gv, bv, spec, SurrogateGrad::Ste)
        .unwrap();
    let want = quantize_weight(&w, &spec, Some((&gamma, &beta))).unwrap().dequantize();
    assert_eq!(g.value(y), &want);

    let x = Tensor::randn(5, 12, 2.0, &mut r);
    for scheme in [TokenScheme::Shifted, TokenScheme::Absmax] {
        let spec = TokenQuantSpec {
            scheme,
            ..TokenQuantSpec::new(4, 4)
        };
        let xv = g.constant(x.clone());
        let y = g.fake_quant_token(xv, spec, SurrogateGrad::Ste).unwrap();
        assert_eq!(g.value(y), &fake_quantize_token(&x, &spec).unwrap());
    }
}

#[test]
fn frozen_code_weight_gradient_matches_finite_differences() {
    // FD with a step small enough not to cross rounding boundaries measures
    // the frozen-code derivative with respect to the clipping factors.
    let mut r = rng(8);
    let w = Tensor::randn(8, 2, 1.0, &mut r);
    let spec = WeightQuantSpec::new(4, 8);
    let gamma = Tensor::from_rows(&[vec![0.93, 0.87]]);
    let beta = Tensor::from_rows(&[vec![0.91, 0.95]]);
    let c = gradcheck(&gamma, 1e-4, |g, v| {
        let wv = g.constant(w.clone());
        let bv = g.constant(beta.clone());
        g.fake_quant_weight(wv, v, bv, spec, SurrogateGrad::FrozenCodes)
    })
    .unwrap();
    assert!(c.rel_err() < 1e-2, "gamma: {}", c.rel_err());
    let c = gradcheck(&beta, 1e-4, |g, v| {
        let wv = g.constant(w.clone());
        let gv = g.constant(gamma.clone());
        g.fake_quant_weight(wv, gv, v, spec, SurrogateGrad::FrozenCodes)
    })
    .unwrap();
    assert!(c.rel_err() < 1e-2, "beta: {}", c.rel_err());
}

#[test]
fn frozen_code_token_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let x = Tensor::randn(3, 8, 1.0, &mut r);
    for scheme in [TokenScheme::Shifted, TokenScheme::Absmax] {
        let spec = TokenQuantSpec {
            scheme,
            ..TokenQuantSpec::new(4, 4)
        };
        // Scale input by a parameter so the probe is a smooth path through
        // the grid; codes are invariant under the scaling.
        let s = Tensor::scalar(1.3);
        let c = gradcheck(&s, 1e-4, |g, v| {
            let xv = g.constant(x.clone());
            let y = g.mul(xv, v)?;
            g.fake_quant_token(y, spec, SurrogateGrad::FrozenCodes)
        })
        .unwrap();
        assert!(c.rel_err() < 1e-2, "{scheme:?}: {}", c.rel_err());
    }
}

#[test]
fn ste_weight_gradient_is_identity_inside_the_grid() {
    let w = Tensor::from_vec(4, 1, vec![-1.0, -0.3, 0.2, 1.0]);
    let spec = WeightQuantSpec::new(4, 4);
    let mut g = Graph::new();
    let wv = g.param(w);
    let gv = g.constant(Tensor::scalar(1.0));
    let bv = g.constant(Tensor::scalar(1.0));
    let y = g.fake_quant_weight(wv, gv, bv, spec, SurrogateGrad::Ste).unwrap();
    let loss = g.sum_all(y);
    let grads = g.backward(loss).unwrap();
    let dw = grads.get(wv).unwrap().data().to_vec();
    // Interior elements pass straight through; min/max also carry the
    // step-size term.
    assert_eq!(dw[1], 1.0);
    assert_eq!(dw[2], 1.0);
    assert!(dw.iter().all(|v| v.is_finite()));
}

#[test]
fn ste_token_gradient_sums_to_upstream_on_constant_shift() {
    // Adding a constant to a token shifts the mean; the quantized output
    // shifts by the same amount, so d(sum out)/d(shift) equals numel.
    let mut r = rng(10);
    let x = Tensor::randn(2, 8, 1.0, &mut r);
    let spec = TokenQuantSpec::new(4, 8);
    for mode in [SurrogateGrad::Ste, SurrogateGrad::FrozenCodes] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let shift = g.param(Tensor::scalar(0.0));
        let y = g.add(xv, shift).unwrap();
        let q = g.fake_quant_token(y, spec, mode).unwrap();
        let loss = g.sum_all(q);
        let grads = g.backward(loss).unwrap();
        let d = grads.get(shift).unwrap().item();
        assert!((d - 16.0).abs() < 1e-4, "{mode:?}: {d}");
    }
}
