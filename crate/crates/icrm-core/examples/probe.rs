// scratch probe: out-of-cell label flip
use icrm_core::env_core::EnvId;
use icrm_core::gaussian::*;

fn main() {
    let a = EnvParams::isotropic(0.5, &[-2.5], &[2.5]).unwrap();
    let b = EnvParams::isotropic(0.5, &[-7.5], &[7.5]).unwrap();
    // Swap-side test env: label 0 mass at +2.4, label 1 at -2.6.
    let test_env = EnvParams::isotropic(0.5, &[2.4], &[-2.6]).unwrap();
    println!("in_cell = {}", in_voronoi_cell(&test_env, &[a.clone(), b.clone()]));
    let train = vec![(EnvId(0), a), (EnvId(1), b)];
    for seed in 0..10u64 {
        let context: Vec<Vec<f64>> = test_env.generate(EnvId(9), 2000, 2000 + seed).into_iter().map(|ex| ex.x).collect();
        let fit = fit_gmm_em(&context, &EmConfig::seeded(seed)).unwrap();
        let model = match_and_orient(&fit, &train).unwrap();
        let (mut agree, mut high) = (0usize, 0usize);
        for i in 0..100 {
            let x = -7.0 + 14.0 * i as f64 / 99.0;
            let p = predict_label0_prob(&[x], &model, PosteriorMode::FullDensity);
            let o = bayes_oracle_prob(&[x], &test_env, PosteriorMode::FullDensity);
            if (o - 0.5).abs() >= 0.1 { high += 1; if (p > 0.5) == (o > 0.5) { agree += 1; } }
        }
        println!("seed {seed}: agreement on {high} high-margin queries = {:.4}, matched env {} {:?}", agree as f64 / high as f64, model.source_env, model.orientation);
    }
}
