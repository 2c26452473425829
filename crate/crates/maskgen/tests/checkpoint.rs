use maskgen::checkpoint::{describe, Checkpoint, CheckpointError, MAGIC, VERSION};
use maskgen::pipeline::{build_model, prepare_finetune, train_tokenizers, FinetuneConfig};
use maskgen::state;
use maskgen_core::adaptation::{LoraSpec, TaskCondition};
use maskgen_core::net::NetConfig;
use maskgen_core::numerics::{AdamWConfig, RngStream};
use maskgen_core::quantizers::QuantizerConfig;
use maskgen_core::toyworld::{World, WorldSpec};
use maskgen_core::training::{finetune_step, FinetuneExample, TaskSpec, TrainState};
use maskgen_core::toyworld::Task;
use proptest::prelude::*;

fn small_net() -> NetConfig {
    NetConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, vocab_size: 0, max_len: 64, rope_base: 1e4 }
}

fn sample_checkpoint() -> Checkpoint {
    let world = World::new(WorldSpec::default()).unwrap();
    let q = QuantizerConfig { steps: 20, ssl_codebook_size: 32, ..Default::default() };
    let tok = train_tokenizers(&world, &q, 1, &mut |_| {}).unwrap();
    let (m, p) = build_model(&small_net(), &tok.ssl, 1, "net").unwrap();
    let mut st = prepare_finetune(m, p, &world, &FinetuneConfig::default(), 1).unwrap();
    // a few steps so optimizer moments are non-trivial
    let mut rng = RngStream::new(3);
    for _ in 0..3 {
        let utt = world.sample_utterance(&mut rng).unwrap();
        let ex = FinetuneExample {
            condition: TaskCondition::Symbols(utt.symbols.clone()),
            targets: tok.ssl.tokens(&utt.features).unwrap(),
            prompt_len: 0,
        };
        finetune_step(&mut st, &[ex], &TaskSpec::new(Task::Tts, 1.0), 1.0, &mut rng).unwrap();
    }
    let mut c = Checkpoint { step: st.step(), rng: Some(rng.state()), config: serde_json::json!({"note": "test"}), ..Default::default() };
    state::put_tokenizers(&mut c, &q, &tok);
    state::put_train_state(&mut c, "model/", &st);
    c
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = sample_checkpoint();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let n = c.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, c);
    for (x, y) in loaded.sections.iter().zip(&c.sections) {
        assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(loaded.save(&b).unwrap(), n);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // only the two checkpoints remain: the temporary file was renamed away
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn restored_components_match() {
    let c = sample_checkpoint();
    let c = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
    let st = state::get_train_state(&c, "model/", AdamWConfig::default()).unwrap();
    assert_eq!(st.step(), c.step);
    let mut again = Checkpoint { step: c.step, rng: c.rng, config: c.config.clone(), ..Default::default() };
    let (q, tok) = state::get_tokenizers(&c, 16).unwrap();
    state::put_tokenizers(&mut again, &q, &tok);
    state::put_train_state(&mut again, "model/", &st);
    assert_eq!(again.to_bytes(), c.to_bytes());
    assert_eq!(RngStream::from_state(c.rng.unwrap()).state(), c.rng.unwrap());
}

#[test]
fn flipped_payload_byte_is_corruption() {
    let bytes = sample_checkpoint().to_bytes();
    for at in [bytes.len() / 2, bytes.len() - 10, 30] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corruption(_))), "flip at {at}");
    }
}

#[test]
fn wrong_magic_is_format_error_naming_it() {
    let mut bytes = sample_checkpoint().to_bytes();
    bytes[..4].copy_from_slice(b"XXXX");
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(matches!(err, CheckpointError::BadMagic { .. }));
    assert!(err.to_string().contains("XXXX"), "{err}");
    assert!(err.to_string().starts_with("format error"));
    assert!(matches!(Checkpoint::from_bytes(b"MG"), Err(CheckpointError::Format(_))));
}

#[test]
fn other_version_is_version_error() {
    let mut bytes = sample_checkpoint().to_bytes();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(CheckpointError::Version { found, expected }) if found == VERSION + 1 && expected == VERSION
    ));
}

#[test]
fn header_layout() {
    let c = Checkpoint { step: 7, ..Default::default() };
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..4], &MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + meta_len + 4);
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
    let mut one = Checkpoint::default();
    one.put("x", &[2], vec![1.0, -2.5]);
    let b = one.to_bytes();
    let meta_len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    let at = 16 + meta_len;
    assert_eq!(u64::from_le_bytes(b[at..at + 8].try_into().unwrap()), 8);
    assert_eq!(&b[at + 8..at + 12], &1.0f32.to_le_bytes());
    assert_eq!(&b[at + 12..at + 16], &(-2.5f32).to_le_bytes());
}

#[test]
fn describe_lists_header_and_sections() {
    let c = sample_checkpoint();
    let text = describe(&c);
    assert!(text.starts_with(&format!("magic MGMK\nversion {VERSION}\nstep 3\n")));
    assert!(text.contains("\n  model/param/embed ["), "{text}");
}

#[test]
fn lora_overlay_sections_attach_to_a_shared_base() {
    let world = World::new(WorldSpec::default()).unwrap();
    let q = QuantizerConfig { steps: 10, ssl_codebook_size: 32, ..Default::default() };
    let tok = train_tokenizers(&world, &q, 2, &mut |_| {}).unwrap();
    let (m, p) = build_model(&small_net(), &tok.ssl, 2, "net").unwrap();
    let base = { let mut c = Checkpoint::default(); state::put_train_state(&mut c, "base/", &TrainState::new(m.clone(), p.clone(), AdamWConfig::default())); c };
    let cfg = FinetuneConfig { lora: Some(LoraSpec::default()), ..Default::default() };
    let mut st = prepare_finetune(m, p, &world, &cfg, 2).unwrap();
    let mut rng = RngStream::new(4);
    let utt = world.sample_utterance(&mut rng).unwrap();
    let cond = TaskCondition::Symbols(utt.symbols.clone());
    let targets = tok.ssl.tokens(&utt.features).unwrap();
    for _ in 0..3 {
        let ex = FinetuneExample { condition: cond.clone(), targets: targets.clone(), prompt_len: 0 };
        finetune_step(&mut st, &[ex], &TaskSpec { p_drop: 0.0, ..TaskSpec::new(Task::Tts, 1.0) }, 1.0, &mut rng).unwrap();
    }
    let mut overlay = Checkpoint::default();
    // the condition modules are trained too; keep them alongside the overlay
    let mut with_cond = Checkpoint::default();
    state::put_train_state(&mut with_cond, "ft/", &st);
    state::put_lora_overlay(&mut overlay, "tts/", &st).unwrap();
    assert!(overlay.sections.iter().all(|s| s.name.starts_with("tts/lora.")));

    let (mut model, mut params) = state::get_model(&base, "base/").unwrap();
    model.attach_text(&mut params, world.spec.alphabet, &RngStream::new(0)).unwrap();
    model.attach_adapter(&mut params, world.spec.d_feat, &RngStream::new(0)).unwrap();
    for i in model.adapt.base_len..params.len() {
        let name = params.get(i).name.clone();
        let s = with_cond.section(&format!("ft/param/{name}")).unwrap();
        params.get_mut(i).value.data_mut().copy_from_slice(&s.data);
    }
    state::apply_lora_overlay(&overlay, "tts/", &mut model, &mut params).unwrap();
    let tokens: Vec<u32> = targets.iter().map(|_| model.net.mask_id()).collect();
    let want = st.model.forward(&st.params, &tokens, &cond).unwrap();
    let got = model.forward(&params, &tokens, &cond).unwrap();
    assert_eq!(want, got);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn arbitrary_sections_round_trip(
        arrays in proptest::collection::vec(proptest::collection::vec(any::<u32>(), 0..40), 0..6),
        step in any::<u64>(),
    ) {
        let mut c = Checkpoint { step, ..Default::default() };
        for (i, a) in arrays.iter().enumerate() {
            c.put(format!("s{i}"), &[a.len()], a.iter().map(|&b| f32::from_bits(b)).collect());
        }
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.sections.len(), arrays.len());
        for (s, a) in back.sections.iter().zip(&arrays) {
            let bits: Vec<u32> = s.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(&bits, a);
        }
    }
}
