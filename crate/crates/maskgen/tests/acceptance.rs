//! Acceptance suite: twelve criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the summary lines are always
//! printed. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 5 11`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use maskgen::checkpoint::{Checkpoint, CheckpointError};
use maskgen::pipeline::{
    self, build_model, evaluate, finetune, pretrain, prepare_finetune, train_tokenizers, AcousticTrainConfig, DecodeSection,
    EvalSpec, FinetuneConfig, Tokenizers,
};
use maskgen::state;
use maskgen_core::adaptation::{AdaptedNet, LoraSpec, TaskCondition};
use maskgen_core::mgm::{cfg_combine, iterative_decode, remask_count, DecodeConfig, MaskState, Predictor, ScheduleConfig};
use maskgen_core::net::{Net, NetConfig, NetInputs};
use maskgen_core::numerics::{gradient_check, AdamWConfig, DenseArray, ParamStore, RngStream, ScalarObjective, Tape, Var};
use maskgen_core::quantizers::{Codebook, QuantizerConfig, RvqCodebook};
use maskgen_core::toyworld::{cosine, symbol_error_rate, Readout, Task, World, WorldSpec};
use maskgen_core::training::{PretrainConfig, StepLog, TaskSpec, TrainState};

// Toy experiment scale shared by criteria 7-10.
const NET: NetConfig = NetConfig { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, vocab_size: 0, max_len: 64, rope_base: 10_000.0 };
const PRETRAIN_STEPS: u64 = 20_000;
const PRETRAIN_LR: f64 = 2e-3;
const FINETUNE_STEPS: u64 = 2_000;
const FINETUNE_LR: f64 = 5e-3;
const FINETUNE_BATCH: usize = 512;
// long TTS run: a constant-rate phase, then a low-rate phase
const LONG_FINETUNE_STEPS: u64 = 4_000;
const LONG_DECAY_STEPS: u64 = 2_000;
const LONG_DECAY_LR: f64 = 1e-3;
const LONG_FINETUNE_BATCH: usize = 1024;
const MULTITASK_STEPS: u64 = 3_000;
const ACOUSTIC_STEPS: u64 = 3_000;
const BATCH_TOKENS: usize = 256;
const EVAL_SAMPLES: usize = 100;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Shared experiment context

struct Shared {
    world: World,
    tok: Tokenizers,
    pretrained: (AdaptedNet, ParamStore<f32>),
    pretrain_time: Duration,
}

static SHARED: OnceLock<Shared> = OnceLock::new();
static LONG_TTS: OnceLock<TrainState> = OnceLock::new();

fn quiet() -> impl FnMut(&StepLog) {
    |_| {}
}

fn optimizer(lr: f64) -> AdamWConfig {
    AdamWConfig { lr, warmup_steps: 200, ..Default::default() }
}

fn shared() -> &'static Shared {
    SHARED.get_or_init(|| {
        let t0 = Instant::now();
        let world = World::new(WorldSpec::default()).unwrap();
        let tok = train_tokenizers(&world, &QuantizerConfig::default(), 0, &mut quiet()).unwrap();
        let (m, p) = build_model(&NET, &tok.ssl, 0, "net").unwrap();
        let mut st = TrainState::new(m, p, optimizer(PRETRAIN_LR));
        let cfg = PretrainConfig { steps: PRETRAIN_STEPS, optimizer: optimizer(PRETRAIN_LR), batch_tokens: BATCH_TOKENS, seed: 0, ..Default::default() };
        pretrain(&mut st, &world, &tok.ssl, &cfg, PRETRAIN_STEPS, &mut quiet()).unwrap();
        Shared { world, tok, pretrained: (st.model, st.params), pretrain_time: t0.elapsed() }
    })
}

fn ft_config(steps: u64, batch_tokens: usize) -> FinetuneConfig {
    FinetuneConfig { steps, optimizer: optimizer(FINETUNE_LR), batch_tokens, lora: None, corpus_utterances: None }
}

fn tts_only() -> Vec<TaskSpec> {
    vec![TaskSpec::new(Task::Tts, 1.0)]
}

/// Fine-tunes from the shared pre-trained weights or from a fresh network.
fn tts_model(pretrained: bool, seed: u64, steps: u64, batch_tokens: usize, tasks: &[TaskSpec]) -> TrainState {
    let s = shared();
    let (m, p) = if pretrained { s.pretrained.clone() } else { build_model(&NET, &s.tok.ssl, seed, "net").unwrap() };
    let cfg = ft_config(steps, batch_tokens);
    let mut st = prepare_finetune(m, p, &s.world, &cfg, seed).unwrap();
    finetune(&mut st, &s.world, &s.tok.ssl, tasks, &cfg, 1.0, seed, steps, &mut quiet()).unwrap();
    st
}

fn tts_eval(seed: u64, samples: usize) -> EvalSpec {
    EvalSpec { prompt_symbols: Some(1), ..EvalSpec::new(Task::Tts, samples, 1000 + seed) }
}

fn long_tts() -> &'static TrainState {
    LONG_TTS.get_or_init(|| {
        let s = shared();
        let mut st = tts_model(true, 11, LONG_FINETUNE_STEPS, LONG_FINETUNE_BATCH, &tts_only());
        st.opt.cfg.lr = LONG_DECAY_LR;
        let total = LONG_FINETUNE_STEPS + LONG_DECAY_STEPS;
        let cfg = ft_config(total, LONG_FINETUNE_BATCH);
        finetune(&mut st, &s.world, &s.tok.ssl, &tts_only(), &cfg, 1.0, 11, total, &mut quiet()).unwrap();
        st
    })
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

struct NetObjective {
    net: Net,
    tokens: Vec<u32>,
    targets: Vec<u32>,
    weights: Vec<f64>,
}

impl NetObjective {
    fn run(&self, params: &[DenseArray<f64>], grad: bool) -> maskgen_core::Result<(f64, Vec<DenseArray<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, true)).collect();
        let logits = self.net.graph(&mut tape, &vars, None, &self.tokens, NetInputs::default())?;
        let loss = tape.cross_entropy(logits, &self.targets, &self.weights)?;
        let value = tape.scalar(loss);
        if !grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss);
        let grads = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| DenseArray::from_vec(p.shape(), g.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()])).unwrap())
            .collect();
        Ok((value, grads))
    }
}

impl ScalarObjective for NetObjective {
    fn value(&mut self, p: &[DenseArray<f64>]) -> maskgen_core::Result<f64> {
        Ok(self.run(p, false)?.0)
    }
    fn value_and_grad(&mut self, p: &[DenseArray<f64>]) -> maskgen_core::Result<(f64, Vec<DenseArray<f64>>)> {
        self.run(p, true)
    }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for layers in [1, 4] {
        let cfg = NetConfig { d_model: 8, n_layers: layers, n_heads: 2, d_ff: 16, vocab_size: 12, max_len: 32, rope_base: 1e4 };
        for seed in 0..10 {
            let (net, store) = Net::build::<f64>(cfg, &RngStream::new(seed)).unwrap();
            let mut r = RngStream::new(500 + seed);
            let n = 5 + r.below(4);
            let targets: Vec<u32> = (0..n).map(|_| r.below(12) as u32).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| r.bernoulli(0.6)).collect();
            // at least one masked and one visible position; all-MASK inputs make attention gradients vanish
            mask[0] = true;
            mask[n - 1] = false;
            let st = MaskState::from_targets(&targets, &mask, 0, 12).unwrap();
            let mut obj = NetObjective {
                net,
                tokens: st.tokens,
                targets,
                weights: mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
            };
            // a generic point: the small init leaves attention near uniform and many gradients near zero
            let params: Vec<DenseArray<f64>> = store
                .iter()
                .map(|p| {
                    let mut v = p.value.clone();
                    v.data_mut().iter_mut().for_each(|x| *x += 0.3 * r.normal());
                    v
                })
                .collect();
            let rep = gradient_check(&mut obj, &params, 1e-5).unwrap();
            worst = worst.max(rep.max_relative_error);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 60.0, format!("max relative error {worst:.2e} over 1 and 4 blocks x 10 seeds in {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 2. Decoder invariants

struct RandomLogits {
    vocab: usize,
    rng: RngStream,
}

impl Predictor for RandomLogits {
    type Condition = ();
    fn predict(&mut self, state: &MaskState, cond: Option<&()>) -> maskgen_core::Result<DenseArray<f32>> {
        let shift = if cond.is_some() { 0.5 } else { 0.0 };
        let data = (0..state.len() * self.vocab).map(|_| (2.0 * self.rng.normal() + shift) as f32).collect();
        DenseArray::from_vec(&[state.len(), self.vocab], data)
    }
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = RngStream::new(2024);
    let mut failures = Vec::new();
    let vocab = 10usize;
    let mask_id = vocab as u32;
    for run in 0..1000 {
        let n = rng.int_inclusive(4, 64);
        let steps = rng.int_inclusive(1, 16);
        let with_prompt = run % 2 == 1;
        let p = if with_prompt { rng.int_inclusive(1, n - 1) } else { 0 };
        let prompt: Vec<u32> = (0..p).map(|_| rng.below(vocab) as u32).collect();
        let w = [0.0, 1.0, 2.0][run % 3];
        let mut pred = RandomLogits { vocab, rng: rng.fork_index("pred", run as u64) };
        let cfg = DecodeConfig { cfg_weight: w, ..Default::default() };
        let sched = ScheduleConfig::with_steps(steps);
        let out = iterative_decode(&mut pred, n, &prompt, Some(&()), mask_id, &cfg, &sched, &mut rng).unwrap();
        let open = n - p;
        let mut ok = out.tokens.len() == n && out.tokens.iter().all(|&t| t != mask_id) && out.tokens[..p] == prompt[..];
        let mut last = p;
        for (j, s) in out.trace.iter().enumerate() {
            let j = j + 1;
            let expect = (open as f64 * (std::f64::consts::PI * j as f64 / (2.0 * steps as f64)).cos()).floor() as usize;
            let expect = if j == steps { 0 } else { expect };
            ok &= s.remasked == expect && s.committed >= last && s.committed == n - s.remasked;
            last = s.committed;
        }
        ok &= out.trace.len() == steps;
        if !ok {
            failures.push(run);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(failures.is_empty() && secs < 60.0, format!("{} of 1000 runs violated an invariant ({secs:.1}s)", failures.len()))
}

// ---------------------------------------------------------------------------
// 3. Schedule table

fn criterion_3() -> Outcome {
    let s4 = ScheduleConfig::with_steps(4);
    let table: Vec<usize> = (1..=4).map(|j| remask_count(10, j, &s4).unwrap()).collect();
    let mut ok = table == [9, 7, 3, 0];
    // boundaries: one step remasks nothing; n = 0; final step always 0; j out of range rejected
    ok &= remask_count(10, 1, &ScheduleConfig::with_steps(1)).unwrap() == 0;
    ok &= remask_count(0, 1, &s4).unwrap() == 0;
    ok &= remask_count(1, 1, &s4).unwrap() == 0;
    ok &= remask_count(64, 16, &ScheduleConfig::with_steps(16)).unwrap() == 0;
    ok &= remask_count(10, 0, &s4).is_err() && remask_count(10, 5, &s4).is_err();
    // cos(pi/3) = 1/2 exactly: n=10, S=3, j=2 gives 5
    ok &= remask_count(10, 2, &ScheduleConfig::with_steps(3)).unwrap() == 5;
    outcome(ok, format!("n=10 S=4 -> {table:?}"))
}

// ---------------------------------------------------------------------------
// 4. Start equivalence

fn criterion_4() -> Outcome {
    let cfg = NetConfig { d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64, vocab_size: 40, max_len: 64, rope_base: 1e4 };
    let (net, base_store) = Net::build::<f32>(cfg, &RngStream::new(4)).unwrap();
    let base = AdaptedNet::new(net, &base_store).unwrap();
    let mut m = base.clone();
    let mut store = base_store.clone();
    m.attach_text(&mut store, 16, &RngStream::new(5)).unwrap();
    m.attach_adapter(&mut store, 16, &RngStream::new(5)).unwrap();
    m.attach_lora(&mut store, &LoraSpec::default(), &RngStream::new(5)).unwrap();
    let mut rng = RngStream::new(44);
    let mut equal = 0;
    for _ in 0..100 {
        let n = rng.int_inclusive(1, 40);
        let tokens: Vec<u32> = (0..n).map(|_| rng.below(41) as u32).collect();
        let frames_n = rng.int_inclusive(1, 40);
        let frames = DenseArray::from_vec(&[frames_n, 16], (0..frames_n * 16).map(|_| rng.normal() as f32).collect()).unwrap();
        let want = base.forward(&base_store, &tokens, &TaskCondition::None).unwrap();
        let got = m.forward(&store, &tokens, &TaskCondition::Frames(frames)).unwrap();
        if got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            equal += 1;
        }
    }
    outcome(equal == 100, format!("{equal}/100 conditioned outputs bit-identical to the base"))
}

// ---------------------------------------------------------------------------
// 5. Guidance identities

fn criterion_5() -> Outcome {
    let mut rng = RngStream::new(5);
    let mut ok = true;
    for _ in 0..100 {
        let rows = rng.int_inclusive(1, 8);
        let cols = rng.int_inclusive(1, 12);
        let mk = |rng: &mut RngStream| {
            DenseArray::from_vec(&[rows, cols], (0..rows * cols).map(|_| (10.0 * rng.normal()) as f32).collect()).unwrap()
        };
        let c = mk(&mut rng);
        let u = mk(&mut rng);
        let w = (3.0 * rng.uniform()) as f32;
        let bits = |a: &DenseArray<f32>| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ok &= bits(&cfg_combine(&c, &u, 0.0).unwrap()) == bits(&c);
        ok &= bits(&cfg_combine(&c, &c, w).unwrap()) == bits(&c);
    }
    outcome(ok, "w=0 and c=u identities bitwise on 100 random logit tables")
}

// ---------------------------------------------------------------------------
// 6. Quantizers

fn random_frames(n: usize, d: usize, scale: f64, rng: &mut RngStream) -> DenseArray<f32> {
    DenseArray::from_vec(&[n, d], (0..n * d).map(|_| (scale * rng.normal()) as f32).collect()).unwrap()
}

fn sq(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn criterion_6() -> Outcome {
    let mut rng = RngStream::new(6);
    let d = 8;
    // idempotence
    let cb = Codebook::new(random_frames(64, d, 1.0, &mut rng)).unwrap();
    let x = random_frames(1000, d, 1.0, &mut rng);
    let ids = cb.quantize(&x).unwrap();
    let idem = cb.quantize(&cb.dequantize(&ids).unwrap()).unwrap() == ids;

    // argmin optimality per layer on 10^4 vectors
    let layers: Vec<Codebook> = (0..4).map(|l| Codebook::new(random_frames(32, d, 0.5f64.powi(l), &mut rng)).unwrap()).collect();
    let rvq = RvqCodebook::new(layers).unwrap();
    let x = random_frames(10_000, d, 1.0, &mut rng);
    let codes = rvq.encode(&x).unwrap();
    let mut optimal = true;
    for i in 0..x.rows() {
        let mut residual = x.row(i).to_vec();
        for (l, layer) in rvq.layers.iter().enumerate() {
            let chosen = codes[l][i];
            let best = (0..layer.size()).map(|k| sq(&residual, layer.code(k as u32))).fold(f32::INFINITY, f32::min);
            optimal &= sq(&residual, layer.code(chosen)) <= best;
            for (r, c) in residual.iter_mut().zip(layer.code(chosen)) {
                *r -= c;
            }
        }
    }

    // constructed code sums: each layer's codes are far apart relative to all finer layers
    let built: Vec<Codebook> = (0..3)
        .map(|l| {
            let scale = 100.0f64.powi(-l);
            let mut codes = vec![0.0f32; 16 * d];
            for k in 0..16 {
                for j in 0..d {
                    codes[k * d + j] = (scale * if (k >> (j % 4)) & 1 == 1 { 1.0 } else { -1.0 } * (1.0 + j as f64 / 4.0)) as f32;
                }
            }
            Codebook::new(DenseArray::from_vec(&[16, d], codes).unwrap()).unwrap()
        })
        .collect();
    let exact = RvqCodebook::new(built).unwrap();
    let mut truth: Vec<Vec<u32>> = vec![Vec::new(); 3];
    let mut sums = Vec::new();
    for _ in 0..500 {
        let mut v = vec![0.0f32; d];
        for (l, layer) in exact.layers.iter().enumerate() {
            let k = rng.below(16) as u32;
            truth[l].push(k);
            for (a, c) in v.iter_mut().zip(layer.code(k)) {
                *a += c;
            }
        }
        sums.extend(v);
    }
    let recovered = exact.encode(&DenseArray::from_vec(&[500, d], sums).unwrap()).unwrap() == truth;

    // monotone mean reconstruction error with depth on the trained toy corpus
    let world = World::new(WorldSpec::default()).unwrap();
    let tok = train_tokenizers(&world, &QuantizerConfig::default(), 0, &mut quiet()).unwrap();
    let corpus = world.frame_batch(4000, &mut RngStream::new(66)).unwrap();
    let errs = tok.acoustic.code_error_by_depth(&corpus).unwrap();
    let monotone = errs.windows(2).all(|w| w[1] <= w[0]);

    outcome(
        idem && optimal && recovered && monotone,
        format!("idempotent {idem}, argmin-optimal {optimal}, code sums recovered {recovered}, depth errors {errs:.4?}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Pre-training helps fine-tuning

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let s = shared();
    let pre_time = s.pretrain_time;
    let mut wins = 0;
    let mut reductions = Vec::new();
    let mut rows = Vec::new();
    for seed in SEEDS {
        let spec = tts_eval(seed, EVAL_SAMPLES);
        let dec = DecodeSection::default();
        let ft = tts_model(true, seed, FINETUNE_STEPS, FINETUNE_BATCH, &tts_only());
        let a = evaluate(&ft.model, &ft.params, &s.world, &s.tok.ssl, &spec, &dec).unwrap().0.symbol_error_rate;
        let sc = tts_model(false, seed, FINETUNE_STEPS, FINETUNE_BATCH, &tts_only());
        let b = evaluate(&sc.model, &sc.params, &s.world, &s.tok.ssl, &spec, &dec).unwrap().0.symbol_error_rate;
        wins += usize::from(a < b);
        reductions.push(if b > 0.0 { (b - a) / b } else { 0.0 });
        rows.push(format!("{a:.3}/{b:.3}"));
    }
    let med = median(&mut reductions);
    // the shared pre-training run counts against the budget even when another criterion triggered it
    let total = t0.elapsed() + if t0.elapsed() < pre_time { pre_time } else { Duration::ZERO };
    let mins = total.as_secs_f64() / 60.0;
    outcome(
        wins >= 4 && med >= 0.20 && mins <= 30.0,
        format!("pretrained/scratch SER per seed [{}], wins {wins}/5, median reduction {:.1}%, {mins:.1} min", rows.join(" "), 100.0 * med),
    )
}

// ---------------------------------------------------------------------------
// 8. Prompt continuation keeps the speaker but not the content

fn criterion_8() -> Outcome {
    let s = shared();
    let (model, params) = &s.pretrained;
    let readout = Readout::for_tokens(&s.world, &s.tok.ssl).unwrap();
    let dec = DecodeSection::default();

    let spec = EvalSpec { prompt_symbols: Some(2), unconditional: true, ..EvalSpec::new(Task::Tts, 200, 808) };
    let samples = pipeline::eval_samples(&s.world, &s.tok.ssl, &spec).unwrap();
    let mut rng = RngStream::new(8).fork("continuation");
    let mut pick = RngStream::new(8).fork("other-speaker");
    let mut closer = 0;
    for smp in &samples {
        let g = pipeline::generate_sample(model, params, &readout, &s.tok.ssl, smp, true, &dec, &mut rng).unwrap();
        let feats = s.tok.ssl.decode_tokens(&g.tokens[smp.prompt_len..]).unwrap();
        let emb = readout.speaker_embedding(&feats);
        let own = smp.utterance.speaker;
        let other = s.world.other_speaker(own, &mut pick);
        closer += usize::from(cosine(&emb, readout.offsets.row(own)) > cosine(&emb, readout.offsets.row(other)));
    }
    let timbre = closer as f64 / samples.len() as f64;

    let uspec = EvalSpec { unconditional: true, ..EvalSpec::new(Task::Tts, EVAL_SAMPLES, 809) };
    let uncond = evaluate(model, params, &s.world, &s.tok.ssl, &uspec, &dec).unwrap().0.symbol_error_rate;
    let ft = long_tts();
    let tts = evaluate(&ft.model, &ft.params, &s.world, &s.tok.ssl, &tts_eval(99, EVAL_SAMPLES), &dec).unwrap().0.symbol_error_rate;
    outcome(
        timbre >= 0.90 && uncond > 0.5 && tts < 0.15,
        format!("(a) prompt speaker closer in {:.1}% of 200; (b) unconditional SER {uncond:.3}, fine-tuned TTS SER {tts:.3}", 100.0 * timbre),
    )
}

// ---------------------------------------------------------------------------
// 9. Text guidance helps target speaker extraction

fn criterion_9() -> Outcome {
    let s = shared();
    let dec = DecodeSection::default();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let st = tts_model(true, 100 + seed, MULTITASK_STEPS, FINETUNE_BATCH, &maskgen_core::training::default_task_mix());
        let plain = EvalSpec::new(Task::Tse, EVAL_SAMPLES, 900 + seed);
        let guided = EvalSpec { text_guided: true, ..plain };
        let a = evaluate(&st.model, &st.params, &s.world, &s.tok.ssl, &guided, &dec).unwrap().0.symbol_error_rate;
        let b = evaluate(&st.model, &st.params, &s.world, &s.tok.ssl, &plain, &dec).unwrap().0.symbol_error_rate;
        wins += usize::from(a < b);
        rows.push(format!("{a:.3}/{b:.3}"));
    }
    outcome(wins >= 4, format!("text-guided/mixture-only TSE SER [{}], wins {wins}/5", rows.join(" ")))
}

// ---------------------------------------------------------------------------
// 10. Two-stage pipeline

fn criterion_10() -> Outcome {
    let s = shared();
    let acfg = AcousticTrainConfig {
        net: NetConfig { vocab_size: 0, max_len: 64, ..NET },
        steps: ACOUSTIC_STEPS,
        optimizer: optimizer(FINETUNE_LR),
        batch_tokens: BATCH_TOKENS,
        steps_per_layer: 4,
    };
    let (_, mut ast) = pipeline::build_acoustic(&acfg, &s.tok, 10).unwrap();
    let prompt = maskgen_core::training::PromptPolicy::default();
    pipeline::train_acoustic(&mut ast, &s.world, &s.tok, &acfg, &prompt, 1.0, 10, ACOUSTIC_STEPS, &mut quiet()).unwrap();

    let ft = long_tts();
    let dec = DecodeSection::default();
    let spec = tts_eval(10, 200);
    let ssl_readout = Readout::for_tokens(&s.world, &s.tok.ssl).unwrap();
    let ac_readout = Readout::through(&s.world, &s.tok.acoustic.projection).unwrap();
    let samples = pipeline::eval_samples(&s.world, &s.tok.ssl, &spec).unwrap();
    let mut rng = RngStream::new(10).fork("two-stage");
    let (mut ssl_err, mut e2e_err) = (0.0, 0.0);
    for smp in &samples {
        let g = pipeline::generate_sample(&ft.model, &ft.params, &ssl_readout, &s.tok.ssl, smp, false, &dec, &mut rng).unwrap();
        ssl_err += g.symbol_error_rate;
        let truth = s.tok.acoustic.tokens(&smp.utterance.features).unwrap();
        let p = smp.prompt_len;
        let aprompt: Vec<Vec<u32>> = truth.iter().map(|l| l[..p].to_vec()).collect();
        let (_, feats) = pipeline::synthesize(&ast, &s.tok, &g.tokens, &aprompt, 4, &dec.sampling, &mut rng).unwrap();
        let n = feats.rows();
        let region = DenseArray::from_vec(&[n - p, feats.cols()], feats.data()[p * feats.cols()..].to_vec()).unwrap();
        e2e_err += symbol_error_rate(&ac_readout.symbols(&region), smp.reference());
    }
    let n = samples.len() as f64;
    let (ssl_err, e2e_err) = (ssl_err / n, e2e_err / n);
    outcome(
        e2e_err <= 1.5 * ssl_err,
        format!("end-to-end SER {e2e_err:.4} vs SSL-stage SER {ssl_err:.4} (limit {:.4})", 1.5 * ssl_err),
    )
}

// ---------------------------------------------------------------------------
// 11. Persistence

fn small_run_state(tok: &Tokenizers) -> TrainState {
    let net = NetConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, vocab_size: 0, max_len: 64, rope_base: 1e4 };
    let (m, p) = build_model(&net, &tok.ssl, 3, "net").unwrap();
    TrainState::new(m, p, optimizer(1e-3))
}

fn criterion_11() -> Outcome {
    let world = World::new(WorldSpec::default()).unwrap();
    let q = QuantizerConfig { steps: 100, ..Default::default() };
    let tok = train_tokenizers(&world, &q, 11, &mut quiet()).unwrap();
    let cfg = PretrainConfig { steps: 200, optimizer: optimizer(1e-3), batch_tokens: 64, seed: 11, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();

    let mut log_straight = Vec::new();
    let mut straight = small_run_state(&tok);
    pretrain(&mut straight, &world, &tok.ssl, &cfg, 200, &mut |l| log_straight.push(l.to_string())).unwrap();

    let mut log_resumed = Vec::new();
    let mut first = small_run_state(&tok);
    pretrain(&mut first, &world, &tok.ssl, &cfg, 100, &mut |l| log_resumed.push(l.to_string())).unwrap();
    let path = dir.path().join("half.ckpt");
    let mut ck = Checkpoint { step: first.step(), rng: Some(RngStream::new(11).state()), ..Default::default() };
    state::put_tokenizers(&mut ck, &q, &tok);
    state::put_train_state(&mut ck, "model/", &first);
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let round_trip = loaded == ck && loaded.to_bytes() == std::fs::read(&path).unwrap();
    let mut second = state::get_train_state(&loaded, "model/", optimizer(1e-3)).unwrap();
    let (_, tok2) = state::get_tokenizers(&loaded, world.spec.d_feat).unwrap();
    pretrain(&mut second, &world, &tok2.ssl, &cfg, 200, &mut |l| log_resumed.push(l.to_string())).unwrap();
    let bits = |s: &TrainState| -> Vec<u32> { s.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
    let moments = |s: &TrainState| -> Vec<u32> { s.opt.state.m.iter().chain(&s.opt.state.v).flatten().map(|v| v.to_bits()).collect() };
    let resume = log_straight == log_resumed && bits(&straight) == bits(&second) && moments(&straight) == moments(&second);

    let bytes = std::fs::read(&path).unwrap();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x40;
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"XXXX");
    let mut version = bytes.clone();
    version[4] = version[4].wrapping_add(1);
    let classes = matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Corruption(_)))
        && matches!(Checkpoint::from_bytes(&magic), Err(e @ CheckpointError::BadMagic { .. }) if e.to_string().contains("XXXX"))
        && matches!(Checkpoint::from_bytes(&version), Err(CheckpointError::Version { .. }));
    outcome(
        round_trip && resume && classes,
        format!("round trip {round_trip}, 100+100 resume equals 200 straight {resume}, error classes {classes}"),
    )
}

// ---------------------------------------------------------------------------
// 12. Determinism

fn full_run(seed: u64) -> Vec<String> {
    let mut lines = Vec::new();
    let world = World::new(WorldSpec { seed, ..Default::default() }).unwrap();
    let q = QuantizerConfig { steps: 100, ..Default::default() };
    let mut log = |l: &StepLog| lines.push(l.to_string());
    let tok = train_tokenizers(&world, &q, seed, &mut log).unwrap();
    let net = NetConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, vocab_size: 0, max_len: 64, rope_base: 1e4 };
    let (m, p) = build_model(&net, &tok.ssl, seed, "net").unwrap();
    let mut st = TrainState::new(m, p, optimizer(1e-3));
    let pc = PretrainConfig { steps: 60, optimizer: optimizer(1e-3), batch_tokens: 64, seed, ..Default::default() };
    pretrain(&mut st, &world, &tok.ssl, &pc, 60, &mut log).unwrap();
    let fc = FinetuneConfig { steps: 60, optimizer: optimizer(1e-3), batch_tokens: 64, lora: Some(LoraSpec::default()), corpus_utterances: Some(50) };
    let mut ft = prepare_finetune(st.model, st.params, &world, &fc, seed).unwrap();
    finetune(&mut ft, &world, &tok.ssl, &maskgen_core::training::default_task_mix(), &fc, 1.0, seed, 60, &mut log).unwrap();
    let acfg = AcousticTrainConfig { net, steps: 20, optimizer: optimizer(1e-3), batch_tokens: 64, steps_per_layer: 2 };
    let (_, mut ast) = pipeline::build_acoustic(&acfg, &tok, seed).unwrap();
    pipeline::train_acoustic(&mut ast, &world, &tok, &acfg, &Default::default(), 1.0, seed, 20, &mut log).unwrap();
    for task in Task::ALL {
        let (rep, _) = evaluate(&ft.model, &ft.params, &world, &tok.ssl, &EvalSpec::new(task, 5, seed), &DecodeSection::default()).unwrap();
        lines.push(serde_json::to_string(&rep).unwrap());
    }
    lines
}

fn criterion_12() -> Outcome {
    let a = full_run(12);
    let b = full_run(12);
    let c = full_run(13);
    outcome(a == b && a != c, format!("{} log lines identical across two runs, other seed differs: {}", a.len(), a != c))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "gradient oracle", criterion_1),
        (2, "decoder invariants", criterion_2),
        (3, "schedule table", criterion_3),
        (4, "start equivalence", criterion_4),
        (5, "guidance identities", criterion_5),
        (6, "quantizer suite", criterion_6),
        (7, "pre-training helps fine-tuning", criterion_7),
        (8, "continuation keeps timbre, not content", criterion_8),
        (9, "text-guided extraction", criterion_9),
        (10, "two-stage pipeline", criterion_10),
        (11, "persistence", criterion_11),
        (12, "determinism", criterion_12),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut results = BTreeMap::new();
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict} {name}: {} [{:.1}s]", out.detail, t0.elapsed().as_secs_f64());
        results.insert(id, out.pass);
    }
    let failed: Vec<u32> = results.iter().filter(|(_, &p)| !p).map(|(&id, _)| id).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
