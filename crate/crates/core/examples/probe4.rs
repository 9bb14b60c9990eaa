use surme_core::simulate::*;
use surme_core::stats::RngStream;

fn main() {
    let opts = StudyOptions::default();
    // Paper summary-table MFVB rows:
    //  (0.0625, 0.8):    re(g1)=+0.086 re(g2)=+0.070 re(b11)=-0.170 re(sz2)=-0.049 re(su2)=+0.174
    //  (0.0625, 0.5714): re(g1)=+0.085 re(g2)=+0.066 re(b11)=-0.166 re(sz2)=-0.055 re(su2)=+0.042
    //  (1, 0.5714):      re(g1)=+0.012 re(g2)=-0.002 re(b11)=-0.001
    for (label, cfg) in [
        ("I-2 (.0625,.8)", DgpConfig::case_i_2(300)),
        ("II-1 (1,.5714)", DgpConfig::case_ii_1(300)),
        ("II-2 (.0625,.5714)", DgpConfig::case_ii_2(300)),
    ] {
        for seed in [11u64, 22] {
            let master = RngStream::new(seed);
            let s = replicate_study(&cfg, EstimatorKind::Mfvb, 20, &master, &opts).unwrap();
            println!(
                "{label} seed {seed}: re_b11={:+.3} re_g1={:+.3} re_g2={:+.3} re_sz2={:+.3} re_su2={:+.3}",
                s.param("beta_1_1").unwrap().rel_error.unwrap(),
                s.param("gamma_1").unwrap().rel_error.unwrap(),
                s.param("gamma_2").unwrap().rel_error.unwrap(),
                s.param("sigma_z2").unwrap().rel_error.unwrap(),
                s.param("sigma_u2").unwrap().rel_error.unwrap(),
            );
        }
    }
}
