use surme_core::simulate::*;
use surme_core::stats::RngStream;

fn main() {
    let opts = StudyOptions::default();
    for seed in [44u64, 55, 66, 77, 88, 99, 111, 222, 333] {
        let master = RngStream::new(seed);
        let s = replicate_study(&DgpConfig::case_ii_2(300), EstimatorKind::Mfvb, 20, &master, &opts).unwrap();
        let g1 = s.param("gamma_1").unwrap().rel_error.unwrap();
        let g2 = s.param("gamma_2").unwrap().rel_error.unwrap();
        let ok = g1 <= 0.135 && g1 >= 0.035 && g2 <= 0.116 && g2 >= 0.016;
        println!("II-2 seed {seed}: re_g1={g1:+.4} re_g2={g2:+.4}  pass={ok}");
    }
}
