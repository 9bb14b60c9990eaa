use surme_core::diagnostics::*;
use surme_core::gibbs::*;
use surme_core::model::PriorSpec;
use surme_core::simulate::*;
use surme_core::stats::RngStream;

fn main() {
    let cfg = DgpConfig::case_i_1(300);
    for seed in [1u64, 2, 3] {
        let master = RngStream::new(9000 + seed);
        let mut data_rng = master.substream(0);
        let data = generate_dataset(&cfg, &mut data_rng).unwrap();
        let priors = PriorSpec::vague(2, 6);
        let mcmc = McmcConfig { draws: 501_000, burnin: 1_000, thin: 100, seed: master.substream(1).seed(), store_latent: false };
        let (chain, _) = gibbs_surme(&data, &priors, &mcmc).unwrap();
        let g1 = chain.column("gamma_1").unwrap();
        let g2 = chain.column("gamma_2").unwrap();
        println!(
            "seed {seed} (5000 retained): IF(g1)={:.3} IF(g2)={:.3} | thinned rho1(g1)={:.3} rho1(g2)={:.3} rho2(g2)={:.3}",
            inefficiency_factor(&g1).unwrap(),
            inefficiency_factor(&g2).unwrap(),
            autocorrelation(&g1, 1).unwrap(),
            autocorrelation(&g2, 1).unwrap(),
            autocorrelation(&g2, 2).unwrap(),
        );
    }
}
