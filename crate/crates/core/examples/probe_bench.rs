use sv_core::data::align_labels;
use sv_core::gplda;
use sv_core::metrics::{self, Betas};
use sv_core::nplda::{self, NPLDAModel, TrainConfig};
use sv_core::synth::{self, SynthConfig};
use sv_core::trials::{sample_trials, SamplingConfig};

fn main() {
    let dim = 20;
    let utts = 16;
    for seed in [601u64, 602, 603] {
        let data = synth::generate(&SynthConfig {
            n_speakers: 600,
            utts_per_speaker: utts,
            dim,
            speaker_scale: 3.0,
            noise_scale: 0.6,
            domain_shift: None,
            seed,
        })
        .unwrap();
        let rows: Vec<usize> = (0..data.embeddings.len()).collect();
        let fit_set = data.embeddings.subset(&rows[..450 * utts]).unwrap();
        let val_set = data.embeddings.subset(&rows[450 * utts..500 * utts]).unwrap();
        let eval_set = data.embeddings.subset(&rows[500 * utts..]).unwrap();
        let train_all = data.embeddings.subset(&rows[..500 * utts]).unwrap();

        let (g, _) = gplda::train_backend(&train_all, 16, 8).unwrap();

        let train_trials = sample_trials(&fit_set, &SamplingConfig {
            n_trials: 100_000, target_fraction: 0.1, seed: seed ^ 0xA, allow_repeats: false,
        }).unwrap();
        let val_trials = sample_trials(&val_set, &SamplingConfig {
            n_trials: 20_000, target_fraction: 0.1, seed: seed ^ 0xC, allow_repeats: false,
        }).unwrap();
        let eval_trials = sample_trials(&eval_set, &SamplingConfig {
            n_trials: 50_000, target_fraction: 0.1, seed: seed ^ 0xD, allow_repeats: false,
        }).unwrap();

        let cmin = |scores: &sv_core::data::ScoreSet, trials| {
            let (s, l) = align_labels(scores, trials).unwrap();
            metrics::c_min(&s, &l, Betas::default()).unwrap().value
        };
        let g_scores = g.score_trials(&eval_set, &eval_trials).unwrap();
        let g_cmin = cmin(&g_scores, &eval_trials);

        for (alpha, lr, epochs) in [(15.0f64, 2e-4f64, 8usize), (5.0, 2e-4, 8), (5.0, 5e-4, 12), (2.0, 5e-4, 12)] {
            let init = NPLDAModel::init_from_gplda(&g, alpha, Betas::default());
            let out = nplda::train(
                init, &fit_set, &train_trials,
                &TrainConfig { batch_size: 8192, epochs, learning_rate: lr, seed, ..TrainConfig::default() },
                Some((&val_set, &val_trials)),
            ).unwrap();
            let n_scores = out.model.score_trials(&eval_set, &eval_trials).unwrap();
            let n_cmin = cmin(&n_scores, &eval_trials);
            println!(
                "seed {seed} alpha {alpha:4} lr {lr:6} ep {epochs:2}: gplda {g_cmin:.4} nplda {n_cmin:.4} improvement {:+.1}% ckpt {:?}",
                100.0 * (g_cmin - n_cmin) / g_cmin, out.best_checkpoint,
            );
        }
    }
}
