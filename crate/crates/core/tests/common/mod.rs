//! Oracles shared between the module tests and the acceptance suite.
#![allow(dead_code)]

use filtervit::filter_attention::{FilterAttention, FilterAttentionSpec, Variant};
use std::sync::Arc;

use filtervit::gradcheck::{check, check_module, seeded, uniform, weighted_sum, GradReport};
use filtervit::nn::{Ctx, ParamStore};
use filtervit::{SelectionIndex, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Full sort by (score desc, index asc), first `k`.
pub fn top_k_bruteforce(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Random map with deliberate ties: values drawn from a handful of levels.
pub fn tied_map(rng: &mut impl Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
    let levels = rng.random_range(2..8);
    let data: Vec<f64> = (0..b * h * w).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    Tensor::new(&[b, 1, h, w], data).unwrap()
}

pub fn spec(c: usize, h: usize, w: usize, k: usize, depth: usize, heads: usize, variant: Variant) -> FilterAttentionSpec {
    FilterAttentionSpec {
        channels: c,
        height: h,
        width: w,
        k,
        depth,
        heads,
        mlp_ratio: 2,
        variant,
        residual_scatter: false,
        eval_selection: Default::default(),
    }
}

pub fn fill(store: &mut ParamStore<f64>, name: &str, v: f64) {
    let id = store.by_name(name).unwrap_or_else(|| panic!("no param {name}"));
    store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = v);
}

/// Saturates the scorer (zero weights, bias +20) and zeroes the positional table.
pub fn saturate(store: &mut ParamStore<f64>, prefix: &str) {
    fill(store, &format!("{prefix}.scorer.weight"), 0.0);
    fill(store, &format!("{prefix}.scorer.bias"), 20.0);
    fill(store, &format!("{prefix}.pos"), 0.0);
}

/// Max abs difference between a saturated full-K block and the plain encoder
/// on the flattened map, for one random instance.
pub fn dense_equivalence_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let b = rng.random_range(1..=2);
    let heads = rng.random_range(1..=2);
    let c = heads * rng.random_range(1..=4);
    let h = rng.random_range(1..=8);
    let depth = rng.random_range(1..=2);
    let mut store = ParamStore::<f64>::new();
    let block = FilterAttention::new(&mut store, "fa", spec(c, h, h, h * h, depth, heads, Variant::Filter), &mut rng).unwrap();
    saturate(&mut store, "fa");
    let x = uniform(&[b, c, h, h], -1.0, 1.0, &mut rng);

    let mut ctx = Ctx::eval();
    let xv = ctx.input(x);
    let y = block.forward(&mut ctx, &store, xv).unwrap();
    let t = ctx.tape.reshape(xv, &[b, c, h * h]).unwrap();
    let t = ctx.tape.permute(t, &[0, 2, 1]).unwrap();
    let t = block.encoder.forward(&mut ctx, &store, t).unwrap();
    let t = ctx.tape.permute(t, &[0, 2, 1]).unwrap();
    let dense = ctx.tape.reshape(t, &[b, c, h, h]).unwrap();
    ctx.tape.value(y).data().iter().zip(ctx.tape.value(dense).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Single-pixel perturbation sweep over a 1×4×4×4 block with K = 4. The
/// scorer keeps only its centre tap so that a pixel's importance depends on
/// that pixel alone. Returns a description of the first violation.
pub fn locality_sweep() -> Result<usize, String> {
    let (c, h, w, k) = (4, 4, 4, 4);
    let mut rng = seeded(404);
    let mut store = ParamStore::<f64>::new();
    let block = FilterAttention::new(&mut store, "fa", spec(c, h, w, k, 1, 2, Variant::Filter), &mut rng).unwrap();
    let wid = store.by_name("fa.scorer.weight").unwrap();
    for (i, v) in store.get_mut(wid).value.data_mut().iter_mut().enumerate() {
        *v = if i % 9 == 4 { rng.random_range(0.5..1.5) } else { 0.0 };
    }
    let centre: Vec<f64> = (0..c).map(|ch| store.get(wid).value.data()[ch * 9 + 4]).collect();
    let x = uniform(&[1, c, h, w], -1.0, 1.0, &mut rng);

    let run = |x: &Tensor<f64>| {
        let mut ctx = Ctx::eval().record_masks();
        let xv = ctx.input(x.clone());
        let y = block.forward(&mut ctx, &store, xv).unwrap();
        let mut sel = ctx.masks.as_ref().unwrap()[0].selection.sample(0).to_vec();
        sel.sort_unstable();
        (ctx.tape.value(y).data().to_vec(), sel)
    };
    let (base, sel) = run(&x);
    let mut checked = 0;
    for p in 0..h * w {
        let selected = sel.contains(&p);
        let mut xp = x.clone();
        // move the score away from the cut so the selection stays put
        let dir = if selected { 0.25 } else { -0.25 };
        for ch in 0..c {
            xp.data_mut()[ch * h * w + p] += dir * centre[ch].signum();
        }
        let (out, sel2) = run(&xp);
        if sel2 != sel {
            return Err(format!("pixel {p}: selection moved"));
        }
        for q in 0..h * w {
            let changed = (0..c).any(|ch| out[ch * h * w + q] != base[ch * h * w + q]);
            if !selected && (q == p) != changed {
                return Err(format!("pixel {p}: position {q} changed={changed}"));
            }
            if selected && !sel.contains(&q) && changed {
                return Err(format!("selected pixel {p} leaked into unselected {q}"));
            }
        }
        checked += 1;
    }
    Ok(checked)
}

/// End-to-end finite-difference check of one random block, loss = sum of output.
/// Instances whose K-th and (K+1)-th scores sit too close are redrawn, since a
/// finite step could then swap the selection.
pub fn block_gradcheck(seed: u64, variant: Variant) -> GradReport {
    let mut rng = seeded(seed);
    loop {
        let heads = rng.random_range(1..=2);
        let c = heads * rng.random_range(1..=2);
        let (h, w) = (rng.random_range(2..=3), rng.random_range(2..=3));
        let k = rng.random_range(1..=h * w);
        let mut store = ParamStore::<f64>::new();
        let block = FilterAttention::new(&mut store, "fa", spec(c, h, w, k, 1, heads, variant), &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let x = uniform(&[1, c, h, w], -1.0, 1.0, &mut rng);
        if k < h * w {
            let mut ctx = Ctx::eval();
            let xv = ctx.input(x.clone());
            let imp = filtervit::filter_attention::compute_importance(&mut ctx, &store, &block.scorer, xv).unwrap();
            let mut s = ctx.tape.value(imp).data().to_vec();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if s[k - 1] - s[k] < 1e-3 {
                continue;
            }
        }
        return check_module(&store, &[x], 1e-5, |ctx, st, v| {
            let y = block.forward(ctx, st, v[0])?;
            Ok(ctx.tape.sum(y))
        })
        .unwrap();
    }
}

/// One randomized finite-difference check; `case % 14` picks the op family
/// (elementwise, broadcasting, activations, softmax, the matmuls, both norms,
/// permute/reshape/mean, pooling/upsampling, gather/scatter/row lookup,
/// cross-entropy, conv2d, fused attention).
pub fn op_case(case: u64, rng: &mut ChaCha8Rng) -> GradReport {
    let b = rng.random_range(1..3);
    let c = rng.random_range(1..4);
    let h = rng.random_range(2..5);
    let w = rng.random_range(2..5);
    let shape = [b, c, h, w];
    let x = uniform(&shape, -1.5, 1.5, rng);
    let seed = case;
    match case % 14 {
        0 => {
            let y = uniform(&shape, -1.0, 1.0, rng);
            check(&[x, y], 1e-5, |tp, v| {
                let s = tp.add(v[0], v[1])?;
                let s = tp.sub(s, v[1])?;
                let s = tp.mul(s, v[1])?;
                weighted_sum(tp, s, seed)
            })
        }
        1 => {
            let m = uniform(&[b, 1, h, w], 0.1, 1.0, rng);
            check(&[x, m], 1e-5, |tp, v| {
                let s = tp.mul(v[0], v[1])?;
                weighted_sum(tp, s, seed)
            })
        }
        2 => check(&[x], 1e-5, |tp, v| {
            let s = tp.sigmoid(v[0]);
            let g = tp.gelu(s);
            let e = tp.exp(g);
            let l = tp.log(e);
            let r = tp.scale(l, 3.0);
            let r = tp.relu6(r);
            let r = tp.add_scalar(r, 0.5);
            weighted_sum(tp, r, seed)
        }),
        3 => {
            let axis = rng.random_range(0..4);
            check(&[x], 1e-5, move |tp, v| {
                let s = tp.softmax(v[0], axis)?;
                weighted_sum(tp, s, seed)
            })
        }
        4 => {
            let k = rng.random_range(1..5);
            let bm = uniform(&[b, w, k], -1.0, 1.0, rng);
            let a = uniform(&[b, h, w], -1.0, 1.0, rng);
            check(&[a, bm], 1e-5, |tp, v| {
                let p = tp.matmul(v[0], v[1])?;
                weighted_sum(tp, p, seed)
            })
        }
        5 => {
            let k = rng.random_range(1..5);
            let bm = uniform(&[b, k, w], -1.0, 1.0, rng);
            let a = uniform(&[b, h, w], -1.0, 1.0, rng);
            check(&[a, bm], 1e-5, |tp, v| {
                let p = tp.matmul_nt(v[0], v[1])?;
                weighted_sum(tp, p, seed)
            })
        }
        6 => {
            let gamma = uniform(&[w], 0.5, 1.5, rng);
            let beta = uniform(&[w], -0.5, 0.5, rng);
            check(&[x, gamma, beta], 1e-5, |tp, v| {
                let y = tp.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(tp, y, seed)
            })
        }
        7 => {
            let gamma = uniform(&[c], 0.5, 1.5, rng);
            let beta = uniform(&[c], -0.5, 0.5, rng);
            check(&[x, gamma, beta], 1e-5, |tp, v| {
                let y = tp.channel_norm(v[0], v[1], v[2])?;
                weighted_sum(tp, y, seed)
            })
        }
        8 => {
            let mut perm = vec![0, 1, 2, 3];
            perm.shuffle(rng);
            check(&[x], 1e-5, move |tp, v| {
                let p = tp.permute(v[0], &perm)?;
                let r = tp.reshape(p, &[b * c * h * w])?;
                let m = tp.mean(r);
                let s = weighted_sum(tp, p, seed)?;
                tp.add(s, m)
            })
        }
        9 => {
            let window = rng.random_range(1..=h.min(w));
            check(&[x], 1e-5, move |tp, v| {
                let p = tp.avg_pool2d(v[0], window, window)?;
                let u = tp.upsample_nearest(p, 2)?;
                let m = tp.spatial_mean(v[0])?;
                let a = weighted_sum(tp, u, seed)?;
                let bsum = weighted_sum(tp, m, seed + 1)?;
                tp.add(a, bsum)
            })
        }
        10 => {
            let hw = h * w;
            let k = rng.random_range(1..=hw);
            let sel = Arc::new(random_selection(rng, b, hw, k));
            let tokens = uniform(&[b, k, c], -1.0, 1.0, rng);
            let table = uniform(&[hw, c], -1.0, 1.0, rng);
            let residual = rng.random_bool(0.5);
            check(&[x, tokens, table], 1e-5, move |tp, v| {
                let g = tp.gather(v[0], sel.clone())?;
                let pos = tp.row_lookup(v[2], sel.clone())?;
                let g = tp.add(g, pos)?;
                let g = tp.mul(g, v[1])?;
                let s = tp.scatter(v[0], g, sel.clone(), residual)?;
                weighted_sum(tp, s, seed)
            })
        }
        11 => {
            let n = rng.random_range(2..6);
            let logits = uniform(&[b * c, n], -2.0, 2.0, rng);
            let labels: Vec<usize> = (0..b * c).map(|_| rng.random_range(0..n)).collect();
            check(&[logits], 1e-5, move |tp, v| tp.cross_entropy(v[0], &labels))
        }
        12 => {
            let groups = [1, 2][rng.random_range(0..2)];
            let cin = groups * rng.random_range(1..3);
            let cout = groups * rng.random_range(1..3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..2);
            let x = uniform(&[b, cin, h.max(k), w.max(k)], -1.0, 1.0, rng);
            let wt = uniform(&[cout, cin / groups, k, k], -1.0, 1.0, rng);
            let bias = uniform(&[cout], -1.0, 1.0, rng);
            check(&[x, wt, bias], 1e-5, move |tp, v| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), stride, padding, groups)?;
                weighted_sum(tp, y, seed)
            })
        }
        _ => {
            let (g, n, d) = (b * c, h * w, rng.random_range(1..4));
            let q = uniform(&[g, n, d], -1.0, 1.0, rng);
            let k = uniform(&[g, n, d], -1.0, 1.0, rng);
            let v = uniform(&[g, n, d], -1.0, 1.0, rng);
            let scale = 1.0 / (d as f64).sqrt();
            check(&[q, k, v], 1e-5, move |tp, v| {
                let y = tp.attention(v[0], v[1], v[2], scale)?;
                weighted_sum(tp, y, seed)
            })
        }
    }
    .unwrap()
}

pub fn random_selection(rng: &mut impl Rng, b: usize, hw: usize, k: usize) -> SelectionIndex {
    let rows = (0..b)
        .map(|_| {
            let mut all: Vec<usize> = (0..hw).collect();
            all.shuffle(rng);
            all.truncate(k);
            all
        })
        .collect();
    SelectionIndex::new(rows, hw).unwrap()
}

/// Softmax regression on flattened raw pixels, trained with hand-rolled Adam;
/// returns validation accuracy.
pub fn linear_probe(train: &filtervit::data::Dataset, val: &filtervit::data::Dataset, epochs: usize, lr: f64, seed: u64) -> f64 {
    let classes = train.images.iter().map(|im| im.label).max().unwrap() + 1;
    let d = train.images[0].pixels.len();
    let feats = |im: &filtervit::data::LabeledImage| -> Vec<f64> { im.pixels.data().iter().map(|&v| v as f64 - 0.5).collect() };
    let xs: Vec<Vec<f64>> = train.images.iter().map(feats).collect();
    let np = (d + 1) * classes;
    let (mut w, mut m, mut v) = (vec![0.0; np], vec![0.0; np], vec![0.0; np]);
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes).map(|c| w[c * (d + 1) + d] + x.iter().zip(&w[c * (d + 1)..c * (d + 1) + d]).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut t = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(32) {
            let mut g = vec![0.0; np];
            for &i in batch {
                let z = logits(&w, &xs[i]);
                let mx = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..classes {
                    let r = e[c] / s - (c == train.images[i].label) as u8 as f64;
                    let row = &mut g[c * (d + 1)..(c + 1) * (d + 1)];
                    row.iter_mut().zip(&xs[i]).for_each(|(gi, x)| *gi += r * x);
                    row[d] += r;
                }
            }
            t += 1;
            let (b1, b2) = (0.9f64, 0.999f64);
            for j in 0..np {
                let gj = g[j] / batch.len() as f64;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let (mh, vh) = (m[j] / (1.0 - b1.powi(t)), v[j] / (1.0 - b2.powi(t)));
                w[j] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
    }
    let correct = val
        .images
        .iter()
        .filter(|im| {
            let z = logits(&w, &feats(im));
            let best = (0..classes).max_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap()).unwrap();
            best == im.label
        })
        .count();
    correct as f64 / val.len() as f64
}
