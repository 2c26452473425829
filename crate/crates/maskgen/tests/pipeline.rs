//! End-to-end training behavior on the toy world at a small scale.

use maskgen::pipeline::{build_model, finetune, prepare_finetune, pretrain, train_tokenizers, FinetuneConfig, Tokenizers};
use maskgen_core::adaptation::AdaptedNet;
use maskgen_core::net::NetConfig;
use maskgen_core::numerics::{AdamWConfig, ParamStore, RngStream};
use maskgen_core::quantizers::QuantizerConfig;
use maskgen_core::toyworld::{build_task_sample, PromptChoice, Task, World, WorldSpec};
use maskgen_core::training::{plan_mask, PretrainConfig, StepLog, TaskSpec, TrainState};

const NET: NetConfig = NetConfig { d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, vocab_size: 0, max_len: 64, rope_base: 1e4 };

fn opt(lr: f64) -> AdamWConfig {
    AdamWConfig { lr, warmup_steps: 50, ..Default::default() }
}

fn setup() -> (World, Tokenizers) {
    let world = World::new(WorldSpec::default()).unwrap();
    let tok = train_tokenizers(&world, &QuantizerConfig { steps: 300, ..Default::default() }, 0, &mut |_: &StepLog| {}).unwrap();
    (world, tok)
}

/// Mean masked cross-entropy over a fixed set of held-out TTS examples.
fn heldout_tts_loss(model: &AdaptedNet, params: &ParamStore<f32>, world: &World, tok: &Tokenizers) -> f64 {
    let mut rng = RngStream::new(4242);
    let (mut total, mut count) = (0.0, 0usize);
    for _ in 0..64 {
        let utt = world.sample_utterance(&mut rng).unwrap();
        let s = build_task_sample(Task::Tts, utt, world, &tok.ssl, PromptChoice::Symbols(1), false, &mut rng).unwrap();
        let plan = plan_mask(s.tokens.len(), s.prompt_len, 1.0, &mut rng).unwrap();
        let input: Vec<u32> =
            s.tokens.iter().zip(&plan.mask).map(|(&t, &m)| if m { model.net.mask_id() } else { t }).collect();
        let logits = model.forward(params, &input, &s.condition).unwrap();
        for (i, _) in plan.mask.iter().enumerate().filter(|(_, &m)| m) {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[s.tokens[i] as usize] as f64;
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn tts_finetune_from_pretrained_lowers_heldout_loss() {
    let (world, tok) = setup();
    let (m, p) = build_model(&NET, &tok.ssl, 1, "net").unwrap();
    let mut st = TrainState::new(m, p, opt(2e-3));
    let pc = PretrainConfig { steps: 300, optimizer: opt(2e-3), batch_tokens: 128, seed: 1, ..Default::default() };
    pretrain(&mut st, &world, &tok.ssl, &pc, 300, &mut |_: &StepLog| {}).unwrap();

    let fc = FinetuneConfig { steps: 200, optimizer: opt(3e-3), batch_tokens: 128, lora: None, corpus_utterances: None };
    let mut ft = prepare_finetune(st.model, st.params, &world, &fc, 1).unwrap();
    let before = heldout_tts_loss(&ft.model, &ft.params, &world, &tok);
    finetune(&mut ft, &world, &tok.ssl, &[TaskSpec::new(Task::Tts, 1.0)], &fc, 1.0, 1, 200, &mut |_: &StepLog| {}).unwrap();
    let after = heldout_tts_loss(&ft.model, &ft.params, &world, &tok);
    assert!(after < before, "held-out loss {before} -> {after}");
}

#[test]
fn finetune_in_two_calls_equals_one() {
    let (world, tok) = setup();
    let (m, p) = build_model(&NET, &tok.ssl, 2, "net").unwrap();
    let fc = FinetuneConfig { steps: 40, optimizer: opt(1e-3), batch_tokens: 96, lora: None, corpus_utterances: Some(20) };
    let tasks = maskgen_core::training::default_task_mix();
    let mut a = prepare_finetune(m.clone(), p.clone(), &world, &fc, 2).unwrap();
    let mut b = prepare_finetune(m, p, &world, &fc, 2).unwrap();
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    finetune(&mut a, &world, &tok.ssl, &tasks, &fc, 1.0, 2, 40, &mut |l: &StepLog| la.push(l.to_string())).unwrap();
    finetune(&mut b, &world, &tok.ssl, &tasks, &fc, 1.0, 2, 15, &mut |l: &StepLog| lb.push(l.to_string())).unwrap();
    finetune(&mut b, &world, &tok.ssl, &tasks, &fc, 1.0, 2, 40, &mut |l: &StepLog| lb.push(l.to_string())).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);
}
