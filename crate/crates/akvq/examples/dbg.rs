use akvq::kvcache::CacheConfig;
use akvq::sim::*;

fn main() {
    let variants = [MethodVariant::RtnInt2, MethodVariant::RtnInt2Wht, MethodVariant::WhtTsa, MethodVariant::Akvq];
    for d in [32usize, 64] {
        for qg in [1.0f32, 2.0, 3.0] {
            let n_seeds = 8;
            let mut means = [0.0f64; 4];
            let mut wins = 0;
            for seed in 0..n_seeds {
                let cache = CacheConfig::new(4, 1, 1, d); // fewer layers for sweep speed
                let mut cfg = SimConfig::new(cache);
                cfg.seed = seed;
                cfg.seq_len_prefill = 512;
                cfg.decode_steps = 64;
                cfg.prefill_query_sample = 32;
                cfg.query_gain = qg;
                let mut cos = [0.0f64; 4];
                for (i, v) in variants.iter().enumerate() {
                    let m = run_variant(&cfg, &[0], *v).unwrap();
                    cos[i] = m.mean_cosine;
                    means[i] += m.mean_cosine / n_seeds as f64;
                }
                if cos[3] > cos[0] { wins += 1; }
            }
            let mono = means[0] < means[1] && means[1] < means[2] && means[2] < means[3];
            println!("d={} qg={}: rtn2={:.4} +wht={:.4} +tsa={:.4} akvq={:.4} wins={}/8 mono={}",
                     d, qg, means[0], means[1], means[2], means[3], wins, mono);
        }
    }
}

