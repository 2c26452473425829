use super::*;
use alloc::vec;

fn small() -> AcousticState {
    let cfg = AcousticConfig {
        net: NetConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, vocab_size: 6, max_len: 64, rope_base: 1e4 },
        depth: 3,
        ssl_vocab: 9,
        steps_per_layer: 4,
    };
    let (model, params) = AcousticNet::build(&cfg, &RngStream::new(1)).unwrap();
    AcousticState::new(model, params, AdamWConfig { warmup_steps: 0, lr: 1e-3, ..Default::default() })
}

fn example(n: usize, prompt_len: usize, rng: &mut RngStream) -> AcousticBatch {
    AcousticBatch {
        ssl_tokens: (0..n).map(|_| rng.below(9) as u32).collect(),
        acoustic: (0..3).map(|_| (0..n).map(|_| rng.below(6) as u32).collect()).collect(),
        prompt_len,
    }
}

#[test]
fn layer_draws_are_uniform() {
    let mut rng = RngStream::new(2);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[draw_layer(4, &mut rng)] += 1;
    }
    assert!(counts.iter().all(|&c| (c as f64 / 1e4 - 0.25).abs() < 0.02), "{counts:?}");
}

#[test]
fn first_layer_condition_ignores_lower_layers() {
    let s = small();
    let mut rng = RngStream::new(3);
    let ex = example(7, 0, &mut rng);
    let mut tape = Tape::<f32>::new();
    let vars = s.params.bind(&mut tape);
    let a = s.model.condition(&mut tape, &vars, &ex.ssl_tokens, &ex.acoustic, 0).unwrap();
    let other = example(7, 0, &mut rng);
    let b = s.model.condition(&mut tape, &vars, &ex.ssl_tokens, &other.acoustic, 0).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    let c = s.model.condition(&mut tape, &vars, &ex.ssl_tokens, &other.acoustic, 1).unwrap();
    assert_ne!(tape.value(a), tape.value(c));
}

#[test]
fn loss_ignores_layers_above_the_drawn_one() {
    let base = small();
    let mut rng = RngStream::new(4);
    let batch = vec![example(10, 2, &mut rng), example(8, 0, &mut rng)];
    let (la, draws) = acoustic_train_step(&mut base.clone(), &batch, 1.0, &mut RngStream::new(5)).unwrap();
    let mut changed = batch.clone();
    for (item, d) in changed.iter_mut().zip(&draws) {
        for l in d.layer + 1..3 {
            item.acoustic[l].iter_mut().for_each(|t| *t = (*t + 1) % 6);
        }
    }
    let (lb, _) = acoustic_train_step(&mut base.clone(), &changed, 1.0, &mut RngStream::new(5)).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    for d in &draws {
        assert!(d.mask[..2].iter().all(|&m| !m) || d.mask.len() == 8);
    }
}

#[test]
fn malformed_batches_rejected() {
    let mut s = small();
    let mut rng = RngStream::new(6);
    let mut e = example(5, 0, &mut rng);
    e.acoustic[1].pop();
    assert!(matches!(acoustic_train_step(&mut s, &[e], 1.0, &mut rng), Err(crate::Error::Shape(_))));
    let mut e = example(5, 0, &mut rng);
    e.acoustic[0][0] = 6;
    assert!(matches!(acoustic_train_step(&mut s, &[e], 1.0, &mut rng), Err(crate::Error::Domain(_))));
}

struct Oracle {
    truth: Vec<Vec<u32>>,
    vocab: usize,
}

impl LayerPredictor for Oracle {
    fn predict_layer(&mut self, ssl: &[u32], lower: &[Vec<u32>], layer: usize, state: &MaskState) -> Result<DenseArray<f32>> {
        assert_eq!(lower.len(), layer);
        assert_eq!(&lower[..], &self.truth[..layer]);
        let n = ssl.len();
        let mut out = DenseArray::from_vec(&[n, self.vocab], vec![-30.0; n * self.vocab])?;
        for i in 0..n {
            out.row_mut(i)[self.truth[layer][i] as usize] = 30.0;
        }
        assert_eq!(state.len(), n);
        Ok(out)
    }
}

#[test]
fn oracle_generation_recovers_truth() {
    let mut rng = RngStream::new(7);
    let ex = example(15, 0, &mut rng);
    let mut o = Oracle { truth: ex.acoustic.clone(), vocab: 6 };
    let out = acoustic_generate(&mut o, &ex.ssl_tokens, &[], 3, 6, 4, &DecodeConfig::default(), &mut rng).unwrap();
    assert_eq!(out, ex.acoustic);
}

#[test]
fn generation_pins_prompt_and_is_layer_causal() {
    let s = small();
    let mut rng = RngStream::new(8);
    let ex = example(12, 4, &mut rng);
    let prompt: Vec<Vec<u32>> = ex.acoustic.iter().map(|l| l[..4].to_vec()).collect();
    let mut p = AcousticPredictor { model: &s.model, params: &s.params };
    let dec = DecodeConfig::default();
    let a = acoustic_generate(&mut p, &ex.ssl_tokens, &prompt, 3, s.model.mask_id(), 4, &dec, &mut RngStream::new(9)).unwrap();
    for (l, layer) in a.iter().enumerate() {
        assert_eq!(&layer[..4], &prompt[l][..]);
        assert!(layer.iter().all(|&t| t < 6));
    }
    let mut top_changed = prompt.clone();
    top_changed[2].iter_mut().for_each(|t| *t = (*t + 3) % 6);
    let b = acoustic_generate(&mut p, &ex.ssl_tokens, &top_changed, 3, s.model.mask_id(), 4, &dec, &mut RngStream::new(9)).unwrap();
    assert_eq!(a[..2], b[..2]);
    let bad = vec![vec![0u32; 4]; 2];
    assert!(acoustic_generate(&mut p, &ex.ssl_tokens, &bad, 3, s.model.mask_id(), 4, &dec, &mut rng).is_err());
}
