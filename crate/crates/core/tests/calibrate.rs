use transducer_lab::eval::{evaluate_dataset, ReportMeta};
use transducer_lab::network::{load_checkpoint, EncoderConfig, Mode, Model, ModelConfig};
use transducer_lab::synthdata::{
    build_prototypes, generate_with_prototypes, AnchorPolicy, Dataset, SynthConfig,
};
use transducer_lab::training::{train, TrainConfig, TrainMode};

fn synth(seed: u64) -> SynthConfig {
    SynthConfig {
        vocab_size: 12,
        feature_dim: 16,
        latent_count: 4,
        ambiguous_pairs: 2,
        ambiguous_boost: 3.0,
        prototype_scale: 1.0,
        bias_scale: 1.0,
        noise_std: 0.3,
        frames_per_token: (4, 6),
        tokens_per_utterance: (3, 5),
        utterances_per_session: (3, 3),
        segments_per_utterance: 1,
        anchor_token_policy: AnchorPolicy::Random { prob: 0.5 },
        num_sessions: 80,
        frame_ms: 10.0,
        seed,
    }
}

fn gen_range(config: &SynthConfig, start: u64, count: usize) -> Dataset {
    let protos = build_prototypes(config).unwrap();
    let sessions = (0..count)
        .map(|i| generate_with_prototypes(config, &protos, start + i as u64).unwrap().0)
        .collect();
    Dataset {
        feature_dim: config.feature_dim,
        frame_ms: config.frame_ms,
        vocab_size: config.model_vocab(),
        sessions,
    }
}

fn model() -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        vocab_size: 13,
        encoder: EncoderConfig {
            num_blocks: 2,
            model_dim: 24,
            num_heads: 2,
            feedforward_dim: 48,
            use_depthwise_conv: false,
            conv_kernel: 3,
            downsample_factor: 2,
        },
        pred_dim: 12,
        joint_dim: 16,
    }
}

fn config(mode: TrainMode, p: usize, f: usize, beta: f64, seed: u64, iters2: u64) -> TrainConfig {
    TrainConfig {
        mode,
        past: p,
        future: f,
        beta,
        peak_lr: 3e-3,
        warmup_iters: 100,
        decay_rate: 0.9996,
        max_iters_phase1: 800,
        max_iters_phase2: iters2,
        bucket_boundaries: vec![80, 160],
        bucket_batch_frames: vec![640, 640, 640],
        eval_every: 250,
        seed,
        model: model(),
        distill_mode: Default::default(),
        phase1_mode: None,
        val_fraction: 0.2,
        max_symbols_per_frame: 6,
        separator_frames: 0,
    }
}

fn wer_of(ckpt_dir: &std::path::Path, eval_set: &Dataset, mode: Mode, p: usize, f: usize) -> (f64, f64) {
    let ckpt = load_checkpoint(ckpt_dir).unwrap();
    let model = Model::new(ckpt.config.clone()).unwrap();
    let report = evaluate_dataset(
        &model,
        &ckpt.store,
        eval_set,
        p,
        f,
        6,
        0,
        ReportMeta {
            run_id: "cal".to_string(),
            mode,
            past: p,
            future: f,
            beta: 0.0,
            checkpoint: "cal".to_string(),
        },
    )
    .unwrap();
    (report.wer, report.ael_ms)
}

#[test]
#[ignore]
fn calibrate_context_effect() {
    let t0 = std::time::Instant::now();
    for seed_idx in 0..1u64 {
        let sc = synth(1001 + seed_idx);
        let train_set = gen_range(&sc, 0, 80);
        let eval_set = gen_range(&sc, 1_000_000, 40);
        let tseed = 2001 + seed_idx;

        let mut results = Vec::new();
        for (name, mode, p, f, beta) in [
            ("stream-p0", TrainMode::Streaming, 0, 0, 0.0),
            ("stream-p1", TrainMode::Streaming, 1, 0, 0.0),
            ("nonstr-p1f1", TrainMode::Nonstreaming, 1, 1, 0.0),
            ("dual-p1f1-b5e4", TrainMode::Dual, 1, 1, 5e-4),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = config(mode, p, f, beta, tseed, 2500);
            let out = train(&cfg, &train_set, dir.path(), None).unwrap();
            let traj: Vec<String> = out.log.iter().map(|l| format!("{}:{:.3}", l.iter, l.val_wer)).collect();
            eprintln!("  traj {}", traj.join(" "));
            let decode_mode = match mode {
                TrainMode::Nonstreaming => Mode::Nonstreaming,
                _ => Mode::Streaming,
            };
            let (dp, df) = match mode {
                TrainMode::Nonstreaming => (p, f),
                _ => (p, 0),
            };
            let (wer, ael) = wer_of(&out.best_dir, &eval_set, decode_mode, dp, df);
            eprintln!(
                "seed {seed_idx} {name}: val {:.3} eval WER {:.4} AEL {:.1}ms ({:.0}s)",
                out.best_val_wer,
                wer,
                ael,
                t0.elapsed().as_secs_f64()
            );
            results.push((name, wer, ael));
        }
        let base = results[0].1;
        for (name, wer, _) in &results[1..] {
            eprintln!(
                "seed {seed_idx} rWERR {name} vs stream-p0: {:.1}%",
                100.0 * (base - wer) / base
            );
        }
        let (plain_ael, dual_ael) = (results[1].2, results[3].2);
        eprintln!("seed {seed_idx} rAELR dual vs stream-p1: {:.1} ms", plain_ael - dual_ael);
    }
}
