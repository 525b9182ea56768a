//! Filter-attention block, data-parallel vs sequential helpers.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use filtervit::filter_attention::{FilterAttention, FilterAttentionSpec, Variant};
use filtervit::nn::{init, Ctx, Mode, ParamStore};
use filtervit::par;

fn block(c: usize, res: usize, k: usize) -> (FilterAttention, ParamStore<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let spec = FilterAttentionSpec {
        channels: c,
        height: res,
        width: res,
        k,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        variant: Variant::Filter,
        residual_scatter: false,
        eval_selection: Default::default(),
    };
    (FilterAttention::new(&mut store, "fa", spec, &mut rng).unwrap(), store)
}

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("filter_attention_fwd_bwd");
    g.sample_size(20);
    for (ch, res, k) in [(24, 32, 256), (48, 16, 64)] {
        let (fa, store) = block(ch, res, k);
        let x = init::uniform::<f32>(&[16, ch, res, res], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for parallel in [true, false] {
            let name = if parallel { "parallel" } else { "sequential" };
            g.bench_with_input(BenchmarkId::new(name, format!("{res}x{res}x{ch}/K{k}")), &x, |b, x| {
                par::set_parallel(parallel);
                b.iter(|| {
                    let mut ctx = Ctx::<f32>::new(Mode::Train, true, 0);
                    let xv = ctx.input(x.clone());
                    let y = fa.forward(&mut ctx, &store, xv).unwrap();
                    let s = ctx.tape.sum(y);
                    ctx.tape.backward(s).unwrap();
                    ctx.param_grads(&store)
                });
            });
        }
    }
    par::set_parallel(true);
    g.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
