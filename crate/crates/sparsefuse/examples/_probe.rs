use sparsefuse::attention::*;
use std::time::Instant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig::default();
    let dim = cfg.dim;
    let k = 80usize;
    let groups = 250usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feats: Vec<f32> = (0..groups*k*dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let w = LayerWeights::init(&cfg, 5);

    // serial: projections for all tokens (3x QKV + 1x out) like attention does
    let n = groups * k;
    let t = Instant::now();
    let mut q = vec![0.0f32; n * dim];
    for i in 0..n {
        matvec(&w.wq, dim, dim, &feats[i*dim..(i+1)*dim], &mut q[i*dim..(i+1)*dim]);
    }
    let one = t.elapsed().as_secs_f64();
    println!("1 matvec/token serial: {:>7.1} ms -> {:.2} GFLOP/s", one*1e3,
             (n*dim*dim*2) as f64 / one / 1e9);

    // logits+softmax+AV cost alone (use q as both q and k and v)
    let t = Instant::now();
    let dh = dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut sink = 0.0f64;
    let mut logits = vec![0.0f64; k];
    let mut acc = vec![0.0f64; dh];
    for g in 0..groups {
        let base = g * k;
        for h in 0..cfg.heads {
            let off = h * dh;
            for qi in 0..k {
                let qv = &q[(base+qi)*dim+off..(base+qi)*dim+off+dh];
                let mut max = f64::NEG_INFINITY;
                for kj in 0..k {
                    let l = dot_f64(qv, &q[(base+kj)*dim+off..(base+kj)*dim+off+dh]) * scale;
                    logits[kj] = l; max = max.max(l);
                }
                let mut denom = 0.0;
                for l in logits.iter_mut() { *l = exp_neg(*l - max); denom += *l; }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for kj in 0..k {
                    let a = logits[kj] / denom;
                    let vj = &q[(base+kj)*dim+off..(base+kj)*dim+off+dh];
                    for (av, vv) in acc.chunks_exact_mut(8).zip(vj.chunks_exact(8)) {
                        for l in 0..8 { av[l] += a * vv[l] as f64; }
                    }
                }
                sink += acc[0];
            }
        }
    }
    let el = t.elapsed().as_secs_f64();
    println!("logits+softmax+AV serial: {:>7.1} ms ({:.1} us/token, sink {sink:.2})", el*1e3, el*1e6/n as f64);
}
