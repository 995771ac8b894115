use sv_core::gplda;
use sv_core::synth::{self, SynthConfig};

fn main() {
    for noise in [0.4f64, 0.3] {
        for seed in [13u64, 71, 7, 42, 99, 123, 2024] {
            let data = synth::generate(&SynthConfig {
                n_speakers: 500,
                utts_per_speaker: 10,
                dim: 20,
                speaker_scale: 1.0,
                noise_scale: noise,
                domain_shift: None,
                seed,
            })
            .unwrap();
            let true_ac = &data.phi * data.phi.transpose();
            let est = gplda::fit_gplda(&data.embeddings, 10).unwrap();
            let est_ac = &est.phi * est.phi.transpose();
            let rel_ac = (&est_ac - &true_ac).norm() / true_ac.norm();
            let rel_wc = (&est.sigma_wc - &data.sigma_wc).norm() / data.sigma_wc.norm();
            println!("noise {noise} seed {seed:5}: ac {rel_ac:.4} wc {rel_wc:.4}");
        }
    }
}
