use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqlab::model::{ModelConfig, ModelParams, TargetKind};
use seqlab::optim::OptimizerConfig;
use seqlab::regimes::RegimeConfig;
use seqlab::tasks::{gen_copy, TaskKind, TaskSpec};
use seqlab::train::{train_loop, TrainConfig, TrainState};

#[test]
#[ignore]
fn probe() {
    for (label, enc, dec, embed, attn, lr, epochs) in [
        ("micro lr1e-3", 2usize, 4usize, 3usize, 3usize, 1e-3, 30usize),
        ("micro lr1e-2", 2, 4, 3, 3, 1e-2, 30),
        ("small lr3e-3", 8, 16, 8, 8, 3e-3, 30),
        ("small lr1e-2", 8, 16, 8, 8, 1e-2, 30),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::new(
            ModelConfig {
                src_vocab: 5,
                target: TargetKind::Discrete { vocab: 5 },
                embed_dim: embed,
                enc_hidden: enc,
                dec_hidden: dec,
                attn_dim: attn,
                attn_filters: 2,
                attn_kernel: 3,
                max_src_len: 8,
            },
            &mut rng,
        )
        .unwrap();
        let spec = TaskSpec { kind: TaskKind::Copy, vocab: 5, min_len: 2, max_len: 3, seed: 6 };
        let data = gen_copy(&spec, 12).unwrap();
        let mut state = TrainState::new(params);
        let t0 = std::time::Instant::now();
        let records = train_loop(
            &mut state,
            &data,
            &RegimeConfig::TeacherForcing,
            None,
            &OptimizerConfig { learning_rate: lr, ..OptimizerConfig::default() },
            &TrainConfig { epochs, batch_size: 4, seed: 5 },
        )
        .unwrap();
        println!(
            "{label}: steps={} first={:.4} last={:.4} elapsed={:?}",
            records.len(),
            records.first().unwrap().value,
            records.last().unwrap().value,
            t0.elapsed()
        );
    }
}
