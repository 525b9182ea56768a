use filtervit::filter_attention::PooledGlobalAttention;
use filtervit::gradcheck::{check_module, seeded, uniform, weighted_sum};
use filtervit::nn::{
    ClassifierHead, Conv2d, Ctx, InvertedResidual, LayerNorm, Linear, MultiHeadSelfAttention, ParamStore,
    TransformerEncoder,
};
use filtervit::{Error, Tensor};
use rand::Rng;

fn set(store: &mut ParamStore<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = store.by_name(name).unwrap_or_else(|| panic!("no param {name}"));
    for (i, v) in store.get_mut(id).value.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn pointwise_identity_conv_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "c", 3, 3, 1, 1, 0, 1, false, &mut seeded(0)).unwrap();
    set(&mut store, "c.weight", |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let x = uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut seeded(1));
    let mut ctx = Ctx::eval();
    let xv = ctx.input(x.clone());
    let y = conv.forward(&mut ctx, &store, xv).unwrap();
    assert_eq!(ctx.tape.value(y).data(), x.data());
}

#[test]
fn all_ones_kernel_on_all_ones_input() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "c", 2, 2, 3, 1, 0, 2, false, &mut seeded(0)).unwrap();
    set(&mut store, "c.weight", |_| 1.0);
    let mut ctx = Ctx::eval();
    let xv = ctx.input(Tensor::ones(&[1, 2, 3, 3]));
    let y = conv.forward(&mut ctx, &store, xv).unwrap();
    assert_eq!(ctx.tape.shape(y), &[1, 2, 1, 1]);
    assert_eq!(ctx.tape.value(y).data(), &[9.0, 9.0]);
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "c", 3, 4, 3, 1, 1, 1, false, &mut seeded(0)).unwrap();
    let mut ctx = Ctx::eval();
    let xv = ctx.input(Tensor::ones(&[1, 2, 4, 4]));
    assert!(matches!(conv.forward(&mut ctx, &store, xv), Err(Error::Dimension { .. })));
    assert!(Conv2d::new(&mut store, "bad", 3, 4, 3, 1, 1, 2, false, &mut seeded(0)).is_err());
}

#[test]
fn conv_gradient_on_random_input() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "c", 3, 4, 3, 1, 1, 1, true, &mut seeded(2)).unwrap();
    let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut seeded(3));
    let r = check_module(&store, &[x], 1e-5, |ctx, st, v| {
        let y = conv.forward(ctx, st, v[0])?;
        weighted_sum(&mut ctx.tape, y, 4)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

/// Loop oracle for a depthwise 3×3, padding 1 convolution.
fn depthwise_case(c: usize, h: usize, w: usize, stride: usize, seed: u64) {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "dw", c, c, 3, stride, 1, c, false, &mut seeded(seed)).unwrap();
    let x = uniform(&[2, c, h, w], -1.0, 1.0, &mut seeded(seed + 1));
    let kern = store.get(conv.weight).value.clone();
    let mut ctx = Ctx::eval();
    let xv = ctx.input(x.clone());
    let y = conv.forward(&mut ctx, &store, xv).unwrap();
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    assert_eq!(ctx.tape.shape(y), &[2, c, oh, ow]);
    for b in 0..2 {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..3 {
                        for dj in 0..3 {
                            let ii = (i * stride + di) as isize - 1;
                            let jj = (j * stride + dj) as isize - 1;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                s += kern.at(&[ch, 0, di, dj]) * x.at(&[b, ch, ii as usize, jj as usize]);
                            }
                        }
                    }
                    assert!((ctx.tape.value(y).at(&[b, ch, i, j]) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn depthwise_matches_per_channel_loop() {
    for (c, h, w, stride) in [(3, 5, 4, 1), (2, 33, 40, 1), (2, 32, 32, 2), (3, 9, 11, 2), (1, 1, 1, 1)] {
        depthwise_case(c, h, w, stride, (h * w) as u64);
    }
}

#[test]
fn strided_depthwise_gradient_check() {
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "dw", 2, 2, 3, 2, 1, 2, false, &mut seeded(12)).unwrap();
    let x = uniform(&[1, 2, 7, 6], -1.0, 1.0, &mut seeded(13));
    let r = check_module(&store, &[x], 1e-5, |ctx, st, v| {
        let y = conv.forward(ctx, st, v[0])?;
        weighted_sum(&mut ctx.tape, y, 14)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

/// Dense attention computed with explicit loops.
fn loop_attention(store: &ParamStore<f64>, attn: &MultiHeadSelfAttention, x: &Tensor<f64>) -> Vec<f64> {
    let [b, k, c] = x.shape()[..] else { panic!() };
    let lin = |l: &Linear, row: &[f64]| -> Vec<f64> {
        let w = &store.get(l.weight).value;
        let bias = &store.get(l.bias.unwrap()).value;
        (0..l.out_dim)
            .map(|o| bias.data()[o] + (0..l.in_dim).map(|i| w.at(&[o, i]) * row[i]).sum::<f64>())
            .collect()
    };
    let h = attn.heads;
    let d = c / h;
    let mut out = Vec::new();
    for bi in 0..b {
        let rows: Vec<&[f64]> = (0..k).map(|t| &x.data()[(bi * k + t) * c..(bi * k + t + 1) * c]).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.query, r)).collect();
        let kk: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.key, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.value, r)).collect();
        for t in 0..k {
            let mut concat = vec![0.0; c];
            for hh in 0..h {
                let s: Vec<f64> = (0..k)
                    .map(|u| (0..d).map(|e| q[t][hh * d + e] * kk[u][hh * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for u in 0..k {
                    let p = (s[u] - mx).exp() / z;
                    for e in 0..d {
                        concat[hh * d + e] += p * v[u][hh * d + e];
                    }
                }
            }
            out.extend(lin(&attn.out, &concat));
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    for (heads, seed) in [(1, 10), (2, 11)] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(seed);
        let attn = MultiHeadSelfAttention::new(&mut store, "a", 4, heads, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
        let x = uniform(&[1, 3, 4], -1.0, 1.0, &mut rng);
        let mut ctx = Ctx::eval();
        let xv = ctx.input(x.clone());
        let (y, weights) = attn.forward_inspect(&mut ctx, &store, xv).unwrap();
        let want = loop_attention(&store, &attn, &x);
        for (a, b) in ctx.tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        for row in weights.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_token_attention_is_projected_value() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(12);
    let attn = MultiHeadSelfAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
    let x = uniform(&[1, 1, 4], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::eval();
    let xv = ctx.input(x);
    let (y, w) = attn.forward_inspect(&mut ctx, &store, xv).unwrap();
    assert!(w.data().iter().all(|&p| p == 1.0));
    let v = attn.value.forward(&mut ctx, &store, xv).unwrap();
    let o = attn.out.forward(&mut ctx, &store, v).unwrap();
    assert_eq!(ctx.tape.value(y).data(), ctx.tape.value(o).data());
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(13);
    let attn = MultiHeadSelfAttention::new(&mut store, "a", 6, 3, &mut rng).unwrap();
    let x = uniform(&[1, 5, 6], -1.0, 1.0, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let mut px = Vec::new();
    for &p in &perm {
        px.extend_from_slice(&x.data()[p * 6..(p + 1) * 6]);
    }
    let mut ctx = Ctx::eval();
    let a = ctx.input(x);
    let b = ctx.input(Tensor::new(&[1, 5, 6], px).unwrap());
    let ya = attn.forward(&mut ctx, &store, a).unwrap();
    let yb = attn.forward(&mut ctx, &store, b).unwrap();
    let (ya, yb) = (ctx.tape.value(ya).data().to_vec(), ctx.tape.value(yb).data().to_vec());
    for (i, &p) in perm.iter().enumerate() {
        for e in 0..6 {
            assert!((yb[i * 6 + e] - ya[p * 6 + e]).abs() < 1e-12);
        }
    }

    let mut ctx = Ctx::eval();
    let same = ctx.input(Tensor::from_f64(&[1, 2, 6], &[0.3, -0.1, 0.7, 0.2, 0.0, 1.0, 0.3, -0.1, 0.7, 0.2, 0.0, 1.0]).unwrap());
    let y = attn.forward(&mut ctx, &store, same).unwrap();
    let d = ctx.tape.value(y).data();
    assert_eq!(&d[..6], &d[6..]);
}

#[test]
fn encoder_shapes_and_identity() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(14);
    let empty = TransformerEncoder::new(&mut store, "e0", 8, 0, 2, 2, &mut rng).unwrap();
    let enc = TransformerEncoder::new(&mut store, "e", 8, 2, 2, 2, &mut rng).unwrap();
    let x = uniform(&[2, 7, 8], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::eval();
    let xv = ctx.input(x.clone());
    let y0 = empty.forward(&mut ctx, &store, xv).unwrap();
    assert_eq!(ctx.tape.value(y0).data(), x.data());
    let y = enc.forward(&mut ctx, &store, xv).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 7, 8]);
    assert!(TransformerEncoder::new(&mut store, "bad", 8, 1, 3, 2, &mut rng).is_err());
}

#[test]
fn depth_one_encoder_is_composition_of_sub_blocks() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(15);
    let enc = TransformerEncoder::new(&mut store, "e", 4, 1, 2, 3, &mut rng).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::eval();
    let xv = ctx.input(x);
    let y = enc.forward(&mut ctx, &store, xv).unwrap();

    let layer = &enc.layers[0];
    let n1 = layer.norm1.forward(&mut ctx, &store, xv).unwrap();
    let a = layer.attn.forward(&mut ctx, &store, n1).unwrap();
    let h = ctx.tape.add(xv, a).unwrap();
    let n2 = layer.norm2.forward(&mut ctx, &store, h).unwrap();
    let f = layer.fc1.forward(&mut ctx, &store, n2).unwrap();
    let f = ctx.tape.gelu(f);
    let f = layer.fc2.forward(&mut ctx, &store, f).unwrap();
    let manual = ctx.tape.add(h, f).unwrap();
    assert_eq!(ctx.tape.value(y).data(), ctx.tape.value(manual).data());
}

#[test]
fn inverted_residual_contracts() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(16);
    let down = InvertedResidual::new(&mut store, "down", 4, 8, 2, 2, &mut rng).unwrap();
    assert!(!down.has_residual());
    let mut ctx = Ctx::eval();
    let xv = ctx.input(uniform(&[1, 4, 8, 6], -1.0, 1.0, &mut rng));
    let y = down.forward(&mut ctx, &store, xv).unwrap();
    assert_eq!(ctx.tape.shape(y), &[1, 8, 4, 3]);

    let mut store = ParamStore::<f64>::new();
    let same = InvertedResidual::new(&mut store, "same", 6, 6, 3, 1, &mut rng).unwrap();
    assert!(same.has_residual());
    set(&mut store, "same.project.weight", |_| 0.0);
    let x = uniform(&[2, 6, 5, 5], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::eval();
    let xv = ctx.input(x.clone());
    let y = same.forward(&mut ctx, &store, xv).unwrap();
    assert_eq!(ctx.tape.value(y).data(), x.data());
}

#[test]
fn inverted_residual_parameter_count() {
    let mut store = ParamStore::<f64>::new();
    InvertedResidual::new(&mut store, "ir", 16, 16, 6, 1, &mut seeded(0)).unwrap();
    assert_eq!(store.count(), 1536 + 864 + 1536 + (192 + 192 + 32));
    assert_eq!(store.count(), 4352);
}

#[test]
fn pooling_examples() {
    let mut ctx = Ctx::<f64>::eval();
    let c = ctx.input(Tensor::full(&[1, 2, 4, 4], 1.75));
    let p = ctx.tape.avg_pool2d(c, 2, 2).unwrap();
    assert!(ctx.tape.value(p).data().iter().all(|&v| v == 1.75));
    let x = ctx.input(Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
    let p = ctx.tape.avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(ctx.tape.value(p).data(), &[2.5]);
    assert!(matches!(ctx.tape.avg_pool2d(x, 3, 3), Err(Error::Dimension { .. })));

    let mut store = ParamStore::<f64>::new();
    let pooled = PooledGlobalAttention::new(&mut store, "p", 8, 2, 1, 2, 2, &mut seeded(0)).unwrap();
    assert_eq!(pooled.token_count(56, 56), 784);
    assert_eq!(56 * 56, 3136);
    // quadratic cost ratio (784/3136)^2 = 1/16
    assert_eq!(3136u64.pow(2), 16 * 784u64.pow(2));
}

#[test]
fn layer_norm_linear_and_head() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(17);
    let ln = LayerNorm::new(&mut store, "ln", 5);
    let lin = Linear::new(&mut store, "lin", 3, 3, true, &mut rng);
    set(&mut store, "lin.weight", |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let head = ClassifierHead::new(&mut store, "head", 4, 10, &mut rng);

    let mut ctx = Ctx::eval();
    let c = ctx.input(Tensor::full(&[2, 5], 3.0));
    let y = ln.forward(&mut ctx, &store, c).unwrap();
    assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let xv = ctx.input(x.clone());
    let y = lin.forward(&mut ctx, &store, xv).unwrap();
    assert_eq!(ctx.tape.value(y).data(), x.data());

    for size in [1, 3, 8] {
        let xv = ctx.input(uniform(&[3, 4, size, size + 1], -1.0, 1.0, &mut rng));
        let y = head.forward(&mut ctx, &store, xv).unwrap();
        assert_eq!(ctx.tape.shape(y), &[3, 10]);
    }
}

#[test]
fn composite_blocks_pass_gradient_checks() {
    let mut rng = seeded(18);
    for case in 0..6u64 {
        let mut store = ParamStore::<f64>::new();
        let c = 2 * rng.random_range(1..3);
        let ir = InvertedResidual::new(&mut store, "ir", c, c, 2, 1, &mut rng).unwrap();
        let enc = TransformerEncoder::new(&mut store, "enc", c, 1, 2, 2, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let x = uniform(&[1, c, 3, 3], -1.0, 1.0, &mut rng);
        let r = check_module(&store, &[x], 1e-5, |ctx, st, v| {
            let h = ir.forward(ctx, st, v[0])?;
            let t = ctx.tape.reshape(h, &[1, c, 9])?;
            let t = ctx.tape.permute(t, &[0, 2, 1])?;
            let t = enc.forward(ctx, st, t)?;
            weighted_sum(&mut ctx.tape, t, case)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "case {case}: {r:?}");
    }
}
