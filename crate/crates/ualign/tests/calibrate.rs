//! Scratch calibration harness (ignored by default; run explicitly while
//! tuning fixture thresholds).

use std::time::Instant;

use ualign::adapter::adapter_init;
use ualign::corpus::{language_init, synth_corpus, Task};
use ualign::numerics::Rng;
use ualign::toyllm::{llm_init, LlmConfig};
use ualign::trainer::{
    evaluate, run_training, FlopLedger, Regime, TrainConfig, TrainerState,
};

#[test]
#[ignore]
fn calibrate_stage1_geometry() {
    let t0 = Instant::now();
    let spec = language_init(2026);
    let train = synth_corpus(
        &spec,
        &[(Task::Asr, 500), (Task::Ic, 500), (Task::Ner, 500), (Task::Sr, 500)],
        &Rng::new(101),
    );
    let eval_set = synth_corpus(
        &spec,
        &[(Task::Asr, 50), (Task::Ic, 50), (Task::Ner, 50), (Task::Sr, 50)],
        &Rng::new(909),
    );
    println!("corpus generated in {:?}", t0.elapsed());

    let llm = llm_init(&LlmConfig::default()).unwrap();
    let mut adapter = adapter_init(&Default::default(), &Rng::new(7)).unwrap();

    let init_report = evaluate(&adapter, &llm, &eval_set, 0).unwrap();
    println!(
        "init: align_cos {:.4} dtw_loss {:.4}",
        init_report.align_cos, init_report.dtw_loss
    );

    let config = TrainConfig {
        regime: Regime::UalignDtw,
        epochs: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(&adapter);
    let mut ledger = FlopLedger::default();
    let t1 = Instant::now();
    let result = run_training(
        &mut adapter,
        &llm,
        &train,
        None,
        &config,
        &mut state,
        &mut ledger,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    println!("stage1 dtw 3 epochs in {:?}", t1.elapsed());
    for es in &result.epoch_stats {
        println!(
            "  epoch {} loss {:.4} steps {} skipped {}",
            es.epoch, es.mean_loss, es.steps, es.skipped
        );
    }
    let t2 = Instant::now();
    let report = evaluate(&adapter, &llm, &eval_set, ledger.total()).unwrap();
    println!("eval in {:?}", t2.elapsed());
    println!(
        "after stage1 dtw: align_cos {:.4} dtw_loss {:.4} flops {:.3e}",
        report.align_cos,
        report.dtw_loss,
        ledger.total() as f64
    );
}

#[test]
#[ignore]
fn calibrate_stage1_asr_based() {
    let spec = language_init(2026);
    let train = synth_corpus(
        &spec,
        &[(Task::Asr, 500), (Task::Ic, 500), (Task::Ner, 500), (Task::Sr, 500)],
        &Rng::new(101),
    );
    let eval_set = synth_corpus(
        &spec,
        &[(Task::Asr, 50), (Task::Ic, 50), (Task::Ner, 50), (Task::Sr, 50)],
        &Rng::new(909),
    );
    let llm = llm_init(&LlmConfig::default()).unwrap();
    let mut adapter = adapter_init(&Default::default(), &Rng::new(7)).unwrap();
    let config = TrainConfig {
        regime: Regime::AsrBased,
        epochs: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(&adapter);
    let mut ledger = FlopLedger::default();
    let t1 = Instant::now();
    run_training(
        &mut adapter,
        &llm,
        &train,
        None,
        &config,
        &mut state,
        &mut ledger,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    println!("stage1 asr-based 3 epochs in {:?}", t1.elapsed());
    let report = evaluate(&adapter, &llm, &eval_set, ledger.total()).unwrap();
    println!(
        "after stage1 asr: align_cos {:.4} dtw_loss {:.4} flops {:.3e} asr_cer {:?}",
        report.align_cos,
        report.dtw_loss,
        ledger.total() as f64,
        report.asr
    );
}

#[test]
#[ignore]
fn calibrate_knobs() {
    let spec = language_init(2026);
    let train = synth_corpus(
        &spec,
        &[(Task::Asr, 500), (Task::Ic, 500), (Task::Ner, 500), (Task::Sr, 500)],
        &Rng::new(101),
    );
    let eval_set = synth_corpus(&spec, &[(Task::Asr, 100)], &Rng::new(909));
    let llm = llm_init(&LlmConfig::default()).unwrap();

    for (batch, epochs, lr) in [(4usize, 3usize, 1e-3), (2, 3, 1e-3), (8, 9, 1e-3), (4, 3, 2e-3)] {
        let mut adapter = adapter_init(&Default::default(), &Rng::new(7)).unwrap();
        let config = TrainConfig {
            regime: Regime::UalignDtw,
            epochs,
            batch_size: batch,
            lr,
            ..TrainConfig::default()
        };
        let mut state = TrainerState::new(&adapter);
        let mut ledger = FlopLedger::default();
        let t = Instant::now();
        let result = run_training(
            &mut adapter, &llm, &train, None, &config, &mut state, &mut ledger,
            |_, _, _, _| Ok(()),
        )
        .unwrap();
        let losses: Vec<f64> = result.epoch_stats.iter().map(|e| e.mean_loss).collect();
        // Alignment-only stats on a small eval subset (no decode).
        let mut cos_sum = 0.0;
        for s in &eval_set {
            let (c, _) = ualign::trainer::alignment_stats(&adapter, &llm, s).unwrap();
            cos_sum += c;
        }
        println!(
            "batch {batch} epochs {epochs} lr {lr}: align_cos {:.4} in {:?} losses {:?}",
            cos_sum / eval_set.len() as f64,
            t.elapsed(),
            losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}

#[test]
#[ignore]
fn calibrate_one_conv_layer() {
    use ualign::adapter::AdapterConfig;
    let spec = language_init(2026);
    let train = synth_corpus(
        &spec,
        &[(Task::Asr, 500), (Task::Ic, 500), (Task::Ner, 500), (Task::Sr, 500)],
        &Rng::new(101),
    );
    let eval_set = synth_corpus(&spec, &[(Task::Asr, 100)], &Rng::new(909));
    let llm = llm_init(&LlmConfig::default()).unwrap();
    let cfg = AdapterConfig {
        conv_layers: 1,
        ..AdapterConfig::default()
    };
    let mut adapter = adapter_init(&cfg, &Rng::new(7)).unwrap();
    // Alignment at init.
    let mut cos0 = 0.0;
    for s in &eval_set {
        cos0 += ualign::trainer::alignment_stats(&adapter, &llm, s).unwrap().0;
    }
    println!("init align_cos {:.4}", cos0 / eval_set.len() as f64);
    let config = TrainConfig {
        regime: Regime::UalignDtw,
        epochs: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainerState::new(&adapter);
    let mut ledger = FlopLedger::default();
    let t = Instant::now();
    let result = run_training(
        &mut adapter, &llm, &train, None, &config, &mut state, &mut ledger,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    let losses: Vec<f64> = result.epoch_stats.iter().map(|e| e.mean_loss).collect();
    let mut cos_sum = 0.0;
    for s in &eval_set {
        cos_sum += ualign::trainer::alignment_stats(&adapter, &llm, s).unwrap().0;
    }
    println!(
        "1-conv-layer: align_cos {:.4} in {:?} losses {:?} ualign_flops {:.3e}",
        cos_sum / eval_set.len() as f64,
        t.elapsed(),
        losses,
        ledger.total() as f64
    );

    // ASR-based from the same init for the flop-ratio check.
    let mut adapter2 = adapter_init(&cfg, &Rng::new(7)).unwrap();
    let config2 = TrainConfig {
        regime: Regime::AsrBased,
        epochs: 3,
        ..TrainConfig::default()
    };
    let mut state2 = TrainerState::new(&adapter2);
    let mut ledger2 = FlopLedger::default();
    let t2 = Instant::now();
    run_training(
        &mut adapter2, &llm, &train, None, &config2, &mut state2, &mut ledger2,
        |_, _, _, _| Ok(()),
    )
    .unwrap();
    let mut cos_asr = 0.0;
    for s in &eval_set {
        cos_asr += ualign::trainer::alignment_stats(&adapter2, &llm, s).unwrap().0;
    }
    println!(
        "asr-based: align_cos {:.4} in {:?} flops {:.3e} ratio {:.2}",
        cos_asr / eval_set.len() as f64,
        t2.elapsed(),
        ledger2.total() as f64,
        ledger2.total() as f64 / ledger.total() as f64
    );
}

/// Full two-stage comparison of the four regimes on a uniform-mix corpus.
#[test]
#[ignore]
fn calibrate_regime_ordering() {
    let spec = language_init(2026);
    let train = synth_corpus(
        &spec,
        &[(Task::Asr, 300), (Task::Ic, 300), (Task::Ner, 300), (Task::Sr, 300)],
        &Rng::new(101),
    );
    let eval_set = synth_corpus(
        &spec,
        &[(Task::Asr, 60), (Task::Ic, 60), (Task::Ner, 60), (Task::Sr, 60)],
        &Rng::new(909),
    );
    let llm = llm_init(&LlmConfig::default()).unwrap();

    let stage1 = |regime: Regime| -> (ualign::adapter::AdapterParams, FlopLedger) {
        let mut adapter = adapter_init(&Default::default(), &Rng::new(7)).unwrap();
        let config = TrainConfig { regime, epochs: 3, ..TrainConfig::default() };
        let mut state = TrainerState::new(&adapter);
        let mut ledger = FlopLedger::default();
        run_training(&mut adapter, &llm, &train, None, &config, &mut state, &mut ledger,
            |_, _, _, _| Ok(())).unwrap();
        (adapter, ledger)
    };
    let stage2 = |mut adapter: ualign::adapter::AdapterParams, mut ledger: FlopLedger, label: &str| {
        let config = TrainConfig { regime: Regime::Stage2, epochs: 3, ..TrainConfig::default() };
        let mut state = TrainerState::new(&adapter);
        let t = Instant::now();
        run_training(&mut adapter, &llm, &train, None, &config, &mut state, &mut ledger,
            |_, _, _, _| Ok(())).unwrap();
        let report = evaluate(&adapter, &llm, &eval_set, ledger.total()).unwrap();
        println!(
            "{label}: ic {:?} ner_all {:?} sr {:?} asr {:?} align {:.3} flops {:.3e} ({:?})",
            report.ic, report.ner_all, report.sr, report.asr, report.align_cos,
            ledger.total() as f64, t.elapsed()
        );
        report
    };

    let (a_dtw, l_dtw) = stage1(Regime::UalignDtw);
    let r_dtw = stage2(a_dtw, l_dtw, "ualign_dtw ");

    let (a_ctc, l_ctc) = stage1(Regime::UalignCtc);
    let r_ctc = stage2(a_ctc, l_ctc, "ualign_ctc ");

    let (a_asr, l_asr) = stage1(Regime::AsrBased);
    let r_asr = stage2(a_asr, l_asr, "asr_based  ");

    // Directly-MT: 6 multitask epochs from fresh (matched total epochs).
    let mut a_dir = adapter_init(&Default::default(), &Rng::new(7)).unwrap();
    let config = TrainConfig { regime: Regime::DirectlyMt, epochs: 6, ..TrainConfig::default() };
    let mut state = TrainerState::new(&a_dir);
    let mut l_dir = FlopLedger::default();
    run_training(&mut a_dir, &llm, &train, None, &config, &mut state, &mut l_dir,
        |_, _, _, _| Ok(())).unwrap();
    let r_dir = evaluate(&a_dir, &llm, &eval_set, l_dir.total()).unwrap();
    println!(
        "directly_mt: ic {:?} ner_all {:?} sr {:?} asr {:?} align {:.3} flops {:.3e}",
        r_dir.ic, r_dir.ner_all, r_dir.sr, r_dir.asr, r_dir.align_cos, l_dir.total() as f64
    );

    println!("\nordering checks:");
    println!("  dtw > ctc on IC:  {} ({:?} vs {:?})", r_dtw.ic > r_ctc.ic, r_dtw.ic, r_ctc.ic);
    println!("  dtw > asr on IC:  {}", r_dtw.ic > r_asr.ic);
    println!("  dtw > dir on IC:  {}", r_dtw.ic > r_dir.ic);
    println!("  dtw > ctc on NER: {}", r_dtw.ner_all > r_ctc.ner_all);
    println!("  dtw > asr on NER: {}", r_dtw.ner_all > r_asr.ner_all);
    println!("  dtw > dir on NER: {}", r_dtw.ner_all > r_dir.ner_all);
    println!("  ctc >= dir on NER: {}", r_ctc.ner_all >= r_dir.ner_all);
    println!("  asr >= dir on NER: {}", r_asr.ner_all >= r_dir.ner_all);
}

/// Focused probe: does the decode objective learn at all on the simplest task?
#[test]
#[ignore]
fn calibrate_stage2_dynamics() {
    let spec = language_init(2026);
    let train = synth_corpus(&spec, &[(Task::Ic, 400)], &Rng::new(101));
    let eval_set = synth_corpus(&spec, &[(Task::Ic, 80)], &Rng::new(909));
    let llm = llm_init(&LlmConfig::default()).unwrap();
    let mut adapter = adapter_init(&Default::default(), &Rng::new(7)).unwrap();

    // Stage 1 first so H is aligned.
    let cfg1 = TrainConfig { regime: Regime::UalignDtw, epochs: 3, ..TrainConfig::default() };
    let mut st1 = TrainerState::new(&adapter);
    let mut ledger = FlopLedger::default();
    run_training(&mut adapter, &llm, &train, None, &cfg1, &mut st1, &mut ledger, |_,_,_,_| Ok(())).unwrap();

    let cfg2 = TrainConfig { regime: Regime::Stage2, epochs: 8, ..TrainConfig::default() };
    let mut st2 = TrainerState::new(&adapter);
    let result = run_training(&mut adapter, &llm, &train, None, &cfg2, &mut st2, &mut ledger, |_,_,_,_| Ok(())).unwrap();
    for es in &result.epoch_stats {
        println!("epoch {} loss {:.4}", es.epoch, es.mean_loss);
    }
    let report = evaluate(&adapter, &llm, &eval_set, 0).unwrap();
    println!("IC accuracy {:?}", report.ic);
    // Decode a few samples verbatim.
    for s in eval_set.iter().take(6) {
        let (h, _) = ualign::adapter::adapter_forward(&adapter, &s.speech).unwrap();
        let pred = ualign::trainer::greedy_decode(&llm, &h, s.task).unwrap();
        println!("target {:?} pred {:?}", s.target, pred);
    }
}

#[test]
#[ignore]
fn calibrate_stage2_lr() {
    let spec = language_init(2026);
    let train = synth_corpus(&spec, &[(Task::Ic, 400)], &Rng::new(101));
    let eval_set = synth_corpus(&spec, &[(Task::Ic, 80)], &Rng::new(909));
    let llm = llm_init(&LlmConfig::default()).unwrap();

    for (lr, epochs, batch) in [(1e-3, 8, 8), (3e-3, 8, 8), (3e-3, 8, 4), (1e-2, 8, 8)] {
        let mut adapter = adapter_init(&Default::default(), &Rng::new(7)).unwrap();
        let cfg1 = TrainConfig { regime: Regime::UalignDtw, epochs: 3, ..TrainConfig::default() };
        let mut st1 = TrainerState::new(&adapter);
        let mut ledger = FlopLedger::default();
        run_training(&mut adapter, &llm, &train, None, &cfg1, &mut st1, &mut ledger, |_,_,_,_| Ok(())).unwrap();
        let cfg2 = TrainConfig { regime: Regime::Stage2, epochs, batch_size: batch, lr, ..TrainConfig::default() };
        let mut st2 = TrainerState::new(&adapter);
        let result = run_training(&mut adapter, &llm, &train, None, &cfg2, &mut st2, &mut ledger, |_,_,_,_| Ok(())).unwrap();
        let report = evaluate(&adapter, &llm, &eval_set, 0).unwrap();
        println!(
            "lr {lr} epochs {epochs} batch {batch}: IC {:?} first-loss {:.3} last-loss {:.3}",
            report.ic,
            result.epoch_stats.first().unwrap().mean_loss,
            result.epoch_stats.last().unwrap().mean_loss
        );
    }
}

#[test]
#[ignore]
fn calibrate_regime_ordering_v2() {
    let spec = language_init(2026);
    let train = synth_corpus(
        &spec,
        &[(Task::Asr, 500), (Task::Ic, 500), (Task::Ner, 500), (Task::Sr, 500)],
        &Rng::new(101),
    );
    let eval_set = synth_corpus(
        &spec,
        &[(Task::Asr, 60), (Task::Ic, 60), (Task::Ner, 60), (Task::Sr, 60)],
        &Rng::new(909),
    );
    let llm = llm_init(&LlmConfig::default()).unwrap();
    let fix = TrainConfig { lr: 3e-3, batch_size: 4, ..TrainConfig::default() };

    let two_stage = |s1: Regime, label: &str| {
        let mut adapter = adapter_init(&Default::default(), &Rng::new(7)).unwrap();
        let cfg1 = TrainConfig { regime: s1, epochs: 3, ..fix.clone() };
        let mut st = TrainerState::new(&adapter);
        let mut ledger = FlopLedger::default();
        run_training(&mut adapter, &llm, &train, None, &cfg1, &mut st, &mut ledger, |_,_,_,_| Ok(())).unwrap();
        let cfg2 = TrainConfig { regime: Regime::Stage2, epochs: 3, ..fix.clone() };
        let mut st2 = TrainerState::new(&adapter);
        run_training(&mut adapter, &llm, &train, None, &cfg2, &mut st2, &mut ledger, |_,_,_,_| Ok(())).unwrap();
        let r = evaluate(&adapter, &llm, &eval_set, ledger.total()).unwrap();
        println!(
            "{label}: ic {:.3} ner_all {:.3} ner_per {:.3?} sr {:.3} asr {:.3} align {:.3} flops {:.3e}",
            r.ic.unwrap(), r.ner_all.unwrap(), r.ner_per, r.sr.unwrap(), r.asr.unwrap(),
            r.align_cos, ledger.total() as f64
        );
        r
    };

    let r_dtw = two_stage(Regime::UalignDtw, "ualign_dtw ");
    let r_ctc = two_stage(Regime::UalignCtc, "ualign_ctc ");
    let r_asr = two_stage(Regime::AsrBased, "asr_based  ");

    let mut a_dir = adapter_init(&Default::default(), &Rng::new(7)).unwrap();
    let cfg = TrainConfig { regime: Regime::DirectlyMt, epochs: 6, ..fix.clone() };
    let mut st = TrainerState::new(&a_dir);
    let mut l_dir = FlopLedger::default();
    run_training(&mut a_dir, &llm, &train, None, &cfg, &mut st, &mut l_dir, |_,_,_,_| Ok(())).unwrap();
    let r_dir = evaluate(&a_dir, &llm, &eval_set, l_dir.total()).unwrap();
    println!(
        "directly_mt: ic {:.3} ner_all {:.3} ner_per {:.3?} sr {:.3} asr {:.3} align {:.3} flops {:.3e}",
        r_dir.ic.unwrap(), r_dir.ner_all.unwrap(), r_dir.ner_per, r_dir.sr.unwrap(), r_dir.asr.unwrap(),
        r_dir.align_cos, l_dir.total() as f64
    );

    println!("\nordering checks:");
    println!("  dtw > ctc IC:  {}", r_dtw.ic > r_ctc.ic);
    println!("  dtw > asr IC:  {}", r_dtw.ic > r_asr.ic);
    println!("  dtw > dir IC:  {}", r_dtw.ic > r_dir.ic);
    println!("  dtw > ctc NER: {}", r_dtw.ner_all > r_ctc.ner_all);
    println!("  dtw > asr NER: {}", r_dtw.ner_all > r_asr.ner_all);
    println!("  dtw > dir NER: {}", r_dtw.ner_all > r_dir.ner_all);
    println!("  ctc >= dir NER: {}", r_ctc.ner_all >= r_dir.ner_all);
    println!("  asr >= dir NER: {}", r_asr.ner_all >= r_dir.ner_all);
}
