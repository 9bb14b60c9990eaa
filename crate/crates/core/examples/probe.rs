use surme_core::diagnostics::*;
use surme_core::gibbs::*;
use surme_core::mfvb::cavi_fit;
use surme_core::model::PriorSpec;
use surme_core::simulate::*;
use surme_core::stats::RngStream;

fn main() {
    let what = std::env::args().nth(1).unwrap_or_default();
    let opts = StudyOptions::default();

    if what == "fgls" {
        for seed in [101u64, 202, 303] {
            let master = RngStream::new(seed);
            let s = replicate_study(&DgpConfig::case_i_1(300), EstimatorKind::Fgls, 20, &master, &opts).unwrap();
            println!(
                "fgls seed {seed}: re_b11={:+.4} re_g1={:+.4} re_g2={:+.4} re_s11={:+.4}",
                s.param("beta_1_1").unwrap().rel_error.unwrap(),
                s.param("gamma_1").unwrap().rel_error.unwrap(),
                s.param("gamma_2").unwrap().rel_error.unwrap(),
                s.param("sigma_eps_1_1").unwrap().rel_error.unwrap()
            );
        }
    }
    if what == "mfvb1" {
        for seed in [11u64, 22, 33, 44] {
            let master = RngStream::new(seed);
            let s = replicate_study(&DgpConfig::case_i_1(300), EstimatorKind::Mfvb, 20, &master, &opts).unwrap();
            println!(
                "mfvb I-1 seed {seed}: b11={:.4} g1={:.4} sz2={:.4} su2={:.4} cycles={:.1} elbo={:.3}",
                s.param("beta_1_1").unwrap().mean_estimate,
                s.param("gamma_1").unwrap().mean_estimate,
                s.param("sigma_z2").unwrap().mean_estimate,
                s.param("sigma_u2").unwrap().mean_estimate,
                s.mean_cycles.unwrap(),
                s.mean_max_elbo.unwrap()
            );
        }
    }
    if what == "mfvb2" {
        for seed in [11u64, 22, 33, 44] {
            let master = RngStream::new(seed);
            let s = replicate_study(&DgpConfig::case_ii_2(300), EstimatorKind::Mfvb, 20, &master, &opts).unwrap();
            println!(
                "mfvb II-2 seed {seed}: re_g1={:+.4} re_g2={:+.4} cycles={:.0}",
                s.param("gamma_1").unwrap().rel_error.unwrap(),
                s.param("gamma_2").unwrap().rel_error.unwrap(),
                s.mean_cycles.unwrap()
            );
        }
    }
    if what == "gibbs" {
        let cfg = DgpConfig::case_i_1(300);
        for seed in [1u64, 2, 3, 4, 5, 6, 7] {
            let master = RngStream::new(9000 + seed);
            let mut data_rng = master.substream(0);
            let data = generate_dataset(&cfg, &mut data_rng).unwrap();
            let priors = PriorSpec::vague(2, 6);
            let mcmc = McmcConfig { draws: 51_000, burnin: 1_000, thin: 100, seed: master.substream(1).seed(), store_latent: false };
            let t0 = std::time::Instant::now();
            let (chain, report) = gibbs_surme(&data, &priors, &mcmc).unwrap();
            let if_g1 = report.diagnostics.as_ref().unwrap().iter().find(|d| d.name == "gamma_1").unwrap().inefficiency.unwrap();
            let if_g2 = report.diagnostics.as_ref().unwrap().iter().find(|d| d.name == "gamma_2").unwrap().inefficiency.unwrap();
            println!(
                "gibbs seed {seed}: g1={:.4} g2={:.4} su2={:.4} IF(g1)={:.3} IF(g2)={:.3}  [{:.2}s]",
                chain.column_mean("gamma_1").unwrap(),
                chain.column_mean("gamma_2").unwrap(),
                chain.column_mean("sigma_u2").unwrap(),
                if_g1, if_g2,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    if what == "acf" {
        let cfg = DgpConfig::case_i_1(300);
        for seed in [41u64, 42, 43] {
            let master = RngStream::new(seed);
            let mut data_rng = master.substream(0);
            let data = generate_dataset(&cfg, &mut data_rng).unwrap();
            let priors = PriorSpec::vague(2, 6);
            let mcmc = McmcConfig { draws: 11_000, burnin: 1_000, thin: 1, seed: master.substream(1).seed(), store_latent: false };
            let (chain, _) = gibbs_surme(&data, &priors, &mcmc).unwrap();
            let g1 = chain.column("gamma_1").unwrap();
            println!(
                "acf seed {seed}: rho1={:.4} rho10={:.4}",
                autocorrelation(&g1, 1).unwrap(),
                autocorrelation(&g1, 10).unwrap()
            );
        }
    }
    if what == "dic" {
        let cfg = DgpConfig::case_i_1(300);
        let mut sur_neg = 0;
        let mut surme_pos = 0;
        let mut order = 0;
        for seed in 0..10u64 {
            let master = RngStream::new(7777 + seed);
            let mut data_rng = master.substream(0);
            let data = generate_dataset(&cfg, &mut data_rng).unwrap();
            let priors = PriorSpec::vague(2, 6);
            let mcmc = McmcConfig { draws: 11_000, burnin: 1_000, thin: 20, seed: master.substream(1).seed(), store_latent: false };
            let (_, r1) = gibbs_surme(&data, &priors, &mcmc).unwrap();
            let (_, r2) = gibbs_sur(&data, &priors, &mcmc).unwrap();
            let s1 = r1.scores.unwrap();
            let s2 = r2.scores.unwrap();
            sur_neg += (s2.p_d < 0.0) as i32;
            surme_pos += (s1.p_d > 0.0) as i32;
            order += (s1.dic < s2.dic) as i32;
            println!("dic seed {seed}: SURME pD={:+.2} DIC={:.1} | SUR pD={:+.2} DIC={:.1}", s1.p_d, s1.dic, s2.p_d, s2.dic);
        }
        println!("counts: pD(SUR)<0: {sur_neg}/10, pD(SURME)>0: {surme_pos}/10, DIC order: {order}/10");
    }
}
