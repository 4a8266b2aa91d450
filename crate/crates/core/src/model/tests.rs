use proptest::prelude::*;

use super::*;
use crate::data::{generate_dataset, DatasetStyle, GenConfig, PairedSample};
use crate::encoders::{transcribe_dataset, AsrConfig, EncoderConfig, FrozenEncoderSet};
use crate::numerics::{AdamConfig, LrSchedule, Stream, Tape, Tensor};
use crate::params::Binder;

fn frozen() -> FrozenEncoderSet {
    FrozenEncoderSet::init(&EncoderConfig::default(), 21).unwrap()
}

fn random_rows(seed: u64, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], Stream::new(seed).normal_vec(n * d, 1.0)).unwrap()
}

#[test]
fn info_nce_single_pair_is_zero() {
    let x = random_rows(1, 1, 5);
    let y = random_rows(2, 1, 5);
    assert_eq!(info_nce_value(&x, &y, 0.07).unwrap(), 0.0);
}

#[test]
fn info_nce_orthonormal_pair_closed_form() {
    let e = Tensor::identity(2);
    let want = (1.0 + (-1.0f64).exp()).ln();
    assert!((want - 0.31326).abs() < 1e-5);
    assert!((info_nce_value(&e, &e, 1.0).unwrap() - want).abs() < 1e-10);
}

#[test]
fn info_nce_uniform_similarities_give_log_n() {
    let n = 6;
    let x = Tensor::full(&[n, 3], 1.0);
    let y = Tensor::full(&[n, 3], -2.0);
    assert!((info_nce_value(&x, &y, 0.5).unwrap() - (n as f64).ln()).abs() < 1e-10);
}

#[test]
fn info_nce_rejects_bad_inputs() {
    let x = random_rows(1, 3, 4);
    assert!(info_nce_value(&x, &x, 0.0).is_err());
    assert!(info_nce_value(&x, &x, -1.0).is_err());
    assert!(info_nce_value(&x, &random_rows(1, 2, 4), 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_positive_and_permutation_invariant(seed in 0u64..10_000, n in 2usize..7, tau in 0.05f64..3.0) {
        let x = random_rows(seed, n, 4);
        let y = random_rows(seed + 1, n, 4);
        let base = info_nce_value(&x, &y, tau).unwrap();
        prop_assert!(base > 0.0);
        let mut perm: Vec<usize> = (0..n).collect();
        Stream::new(seed).shuffle(&mut perm);
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let py = Tensor::from_rows(&perm.iter().map(|&i| y.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!((info_nce_value(&px, &py, tau).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn info_nce_ignores_feature_scale(seed in 0u64..10_000, c in 0.01f64..100.0) {
        let x = random_rows(seed, 4, 3);
        let y = random_rows(seed + 7, 4, 3);
        let mut scaled = x.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= c);
        let a = info_nce_value(&x, &y, 0.1).unwrap();
        let b = info_nce_value(&scaled, &y, 0.1).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn total_loss_permutation_invariant(seed in 0u64..10_000) {
        let n = 4;
        let blocks: Vec<Tensor> = (0..4).map(|k| random_rows(seed * 4 + k, n, 3)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        Stream::new(seed).shuffle(&mut perm);
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let eval = |b: &[Tensor]| {
            let mut tape = Tape::new();
            let v: Vec<_> = b.iter().map(|t| tape.constant(t.clone())).collect();
            let lt = tape.constant(Tensor::scalar(0.2f64.ln()));
            let l = total_loss(&mut tape, v[0], Some(v[1]), Some(v[2]), v[3], &LossConfig::default(), lt).unwrap();
            l.values(&tape)
        };
        let a = eval(&blocks);
        let b = eval(&blocks.iter().map(permute).collect::<Vec<_>>());
        prop_assert!((a.final_loss - b.final_loss).abs() < 1e-10);
        prop_assert!((a.inner - b.inner).abs() < 1e-10);
        prop_assert!((a.outer - b.outer).abs() < 1e-10);
    }
}

fn loss_at(alpha: f64) -> LossValues {
    let blocks: Vec<Tensor> = (0..4).map(|k| random_rows(40 + k, 5, 3)).collect();
    let mut tape = Tape::new();
    let v: Vec<_> = blocks.iter().map(|t| tape.constant(t.clone())).collect();
    let lt = tape.constant(Tensor::scalar(0.07f64.ln()));
    let cfg = LossConfig { alpha, batch_size: 5 };
    total_loss(&mut tape, v[0], Some(v[1]), Some(v[2]), v[3], &cfg, lt).unwrap().values(&tape)
}

#[test]
fn alpha_limits_select_one_term() {
    let a0 = loss_at(0.0);
    assert_eq!(a0.final_loss, a0.outer);
    let a1 = loss_at(1.0);
    assert_eq!(a1.final_loss, a1.inner);
    let d = loss_at(LossConfig::default().alpha);
    assert_eq!(LossConfig::default().alpha, 0.1);
    assert!((d.final_loss - (0.1 * d.inner + 0.9 * d.outer)).abs() < 1e-12);
    assert!(LossConfig { alpha: 1.5, batch_size: 1 }.validate().is_err());
}

#[test]
fn text_prompts_prepend_rows() {
    let mut tape = Tape::new();
    let p = tape.constant(random_rows(1, 4, 32));
    let e = tape.constant(random_rows(2, 10, 32));
    assert_eq!(prepend_text_prompts(&mut tape, None, e).unwrap(), e);
    let out = prepend_text_prompts(&mut tape, Some(p), e).unwrap();
    assert_eq!(tape.shape(out), &[14, 32]);
    assert_eq!(&tape.value(out).data()[..128], tape.value(p).data());
    let bad = tape.constant(random_rows(3, 4, 16));
    assert!(prepend_text_prompts(&mut tape, Some(bad), e).is_err());
    let z = tape.constant(random_rows(4, 9, 32));
    let out = prepend_audio_prompts(&mut tape, Some(p), z).unwrap();
    assert_eq!(tape.shape(out), &[13, 32]);
    assert_eq!(prepend_audio_prompts(&mut tape, None, z).unwrap(), z);
}

#[test]
fn image_prompt_projection() {
    let mut store = crate::params::ParamStore::new();
    store.insert("prompt.proj.w", Tensor::identity(3));
    store.insert("prompt.proj.b", Tensor::zeros(&[1, 3]));
    let p_t = random_rows(5, 4, 3);
    let mut tape = Tape::new();
    let b = Binder::new(&store, false);
    let pv = tape.constant(p_t.clone());
    let out = project_image_prompts(&mut tape, &b, pv).unwrap();
    assert_eq!(tape.value(out), &p_t);

    store.insert("prompt.proj.w", Tensor::zeros(&[3, 3]));
    store.insert("prompt.proj.b", Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
    let mut tape = Tape::new();
    let b = Binder::new(&store, false);
    let pv = tape.constant(p_t);
    let out = project_image_prompts(&mut tape, &b, pv).unwrap();
    for i in 0..4 {
        assert_eq!(tape.value(out).row(i), &[1.0, -2.0, 0.5]);
    }
}

#[test]
fn fusion_is_a_plain_sum() {
    let mut tape = Tape::new();
    let a = tape.constant(random_rows(1, 3, 4));
    let t = tape.constant(random_rows(2, 3, 4));
    let z = tape.constant(Tensor::zeros(&[3, 4]));
    let fa = fuse(&mut tape, a, z).unwrap();
    assert_eq!(tape.value(fa), tape.value(a));
    let ft = fuse(&mut tape, z, t).unwrap();
    assert_eq!(tape.value(ft), tape.value(t));
    let neg = tape.neg(a).unwrap();
    let zero = fuse(&mut tape, a, neg).unwrap();
    let n = tape.l2_normalize_rows(zero).unwrap();
    assert!(tape.value(n).data().iter().all(|v| *v == 0.0));
    let other = tape.constant(random_rows(3, 3, 5));
    assert!(fuse(&mut tape, a, other).is_err());
}

#[test]
fn gradient_of_full_loss_matches_finite_differences() {
    for (i, mode) in [ModelMode::Full, ModelMode::PipelinePrompted, ModelMode::E2eOnly].into_iter().enumerate() {
        for seed in 0..2 {
            let err = total_loss_gradcheck(mode, seed * 10 + i as u64, 1e-5).unwrap();
            assert!(err < 1e-4, "{mode} seed {seed}: {err}");
        }
    }
}

fn toy_dataset(style: DatasetStyle, n: usize) -> crate::data::Dataset {
    let mut d = generate_dataset(&GenConfig { style, n_images: n, captions_per_image: 2, seed: 17 }).unwrap();
    transcribe_dataset(&mut d, &AsrConfig::default(), 0).unwrap();
    d
}

fn batch_of<'a>(samples: &[&'a PairedSample], latents: &'a [Tensor], mode: ModelMode) -> Batch<'a> {
    Batch {
        images: samples.iter().map(|s| s.image.as_slice()).collect(),
        texts: if mode.uses_text() {
            samples.iter().map(|s| s.transcription.as_deref().unwrap()).collect()
        } else {
            vec![]
        },
        latents: if mode.uses_acoustic() { latents.iter().collect() } else { vec![] },
    }
}

#[test]
fn zero_shot_has_no_trainables_and_is_deterministic() {
    let params = BrewClipParams::new(frozen(), ModelMode::PipelineZeroShot, 1);
    assert!(params.trainable.is_empty());
    assert!(Trainer::new(&params, LrSchedule::default(), LossConfig::default(), AdamConfig::default()).is_err());
    let d = toy_dataset(DatasetStyle::Scripted, 4);
    let samples: Vec<&PairedSample> = d.samples.iter().step_by(2).collect();
    let batch = batch_of(&samples, &[], ModelMode::PipelineZeroShot);
    let run = || {
        let mut tape = Tape::new();
        let s = Session::new(&params, false);
        let f = forward_batch(&mut tape, &s, &batch, ModelMode::PipelineZeroShot).unwrap();
        (tape.value(f.f_v).clone(), tape.value(f.f_l).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn mode_mismatch_rejected() {
    let params = BrewClipParams::new(frozen(), ModelMode::PipelineZeroShot, 1);
    let d = toy_dataset(DatasetStyle::Scripted, 2);
    let samples: Vec<&PairedSample> = d.samples.iter().collect();
    let batch = batch_of(&samples, &[], ModelMode::PipelinePrompted);
    let mut tape = Tape::new();
    let s = Session::new(&params, false);
    assert!(forward_batch(&mut tape, &s, &batch, ModelMode::PipelinePrompted).is_err());
}

#[test]
fn channel_outputs_follow_the_mode() {
    let d = toy_dataset(DatasetStyle::MoodAware, 4);
    let samples: Vec<&PairedSample> = d.samples.iter().step_by(2).collect();
    for mode in ModelMode::ALL {
        let params = BrewClipParams::new(frozen(), mode, 2);
        let latents: Vec<Tensor> = samples.iter().map(|s| params.frozen.audio_latents(&s.audio).unwrap()).collect();
        let batch = batch_of(&samples, &latents, mode);
        let mut tape = Tape::new();
        let s = Session::new(&params, false);
        let f = forward_batch(&mut tape, &s, &batch, mode).unwrap();
        assert_eq!(f.f_t.is_some(), mode.uses_text());
        assert_eq!(f.f_a.is_some(), mode.uses_acoustic());
        if mode == ModelMode::Full {
            assert_ne!(tape.value(f.f_l), tape.value(f.f_t.unwrap()));
        }
    }
}

#[test]
fn shared_prompts_feed_both_channels() {
    let d = toy_dataset(DatasetStyle::Scripted, 4);
    let samples: Vec<&PairedSample> = d.samples.iter().step_by(2).collect();
    let mut params = BrewClipParams::new(frozen(), ModelMode::Full, 3);
    let before = params.trainable.get(PROMPTS).unwrap().clone();
    let latents: Vec<Tensor> = samples.iter().map(|s| params.frozen.audio_latents(&s.audio).unwrap()).collect();
    let batch = batch_of(&samples, &latents, ModelMode::Full);

    // P_T gets gradient from the text and the acoustic channel alike
    let mut tape = Tape::new();
    let s = Session::new(&params, true);
    let loss = batch_loss(&mut tape, &s, &batch, &LossConfig::default()).unwrap();
    tape.backward(loss.final_loss).unwrap();
    let g = tape.grad(s.trainable.bound()[PROMPTS]).unwrap();
    assert!(g.iter().any(|v| *v != 0.0));
    drop(s);

    let schedule = LrSchedule { peak_lr: 1e-2, warmup_steps: 0, final_lr: 1e-2, total_steps: 10 };
    let mut trainer = Trainer::new(&params, schedule, LossConfig::default(), AdamConfig::default()).unwrap();
    train_step(&mut params, &mut trainer, &batch, 1).unwrap();
    let after = params.trainable.get(PROMPTS).unwrap().clone();
    assert_ne!(before, after);
    let mut tape = Tape::new();
    let p = tape.constant(after.clone());
    let e_t = tape.constant(random_rows(1, 5, 32));
    let z_a = tape.constant(latents[0].clone());
    let text = prepend_text_prompts(&mut tape, Some(p), e_t).unwrap();
    let audio = prepend_audio_prompts(&mut tape, Some(p), z_a).unwrap();
    assert_eq!(&tape.value(text).data()[..128], &tape.value(audio).data()[..128]);
    assert_eq!(&tape.value(text).data()[..128], after.data());
}

#[test]
fn train_step_moves_only_trainables() {
    let d = toy_dataset(DatasetStyle::Scripted, 6);
    let samples: Vec<&PairedSample> = d.samples.iter().step_by(2).collect();
    for mode in [ModelMode::Full, ModelMode::PipelinePrompted, ModelMode::E2eOnly] {
        let mut params = BrewClipParams::new(frozen(), mode, 4);
        let frozen_before = params.frozen.to_bytes();
        let trainable_before = params.trainable.clone();
        let latents: Vec<Tensor> = samples.iter().map(|s| params.frozen.audio_latents(&s.audio).unwrap()).collect();
        let batch = batch_of(&samples, &latents, mode);
        let schedule = LrSchedule { peak_lr: 1e-3, warmup_steps: 1, final_lr: 1e-4, total_steps: 10 };
        let mut trainer = Trainer::new(&params, schedule, LossConfig::default(), AdamConfig::default()).unwrap();
        let e2e_probe = |p: &BrewClipParams| {
            let mut tape = Tape::new();
            let s = Session::new(p, false);
            let f = forward_batch(&mut tape, &s, &batch, mode).unwrap();
            f.f_a.map(|v| tape.value(v).clone())
        };
        let fa_before = e2e_probe(&params);
        for step in 1..=3 {
            let v = train_step(&mut params, &mut trainer, &batch, step).unwrap();
            assert!(v.final_loss.is_finite());
        }
        assert_eq!(params.frozen.to_bytes(), frozen_before, "{mode}");
        assert_ne!(params.trainable, trainable_before, "{mode}");
        if mode.uses_acoustic() {
            assert_ne!(e2e_probe(&params), fa_before);
        }
        assert_eq!(trainer.adam.step_count, 3);
        let tau = params.tau();
        assert!((TAU_MIN..=TAU_MAX).contains(&tau));
    }
}

#[test]
fn temperature_is_clamped() {
    let d = toy_dataset(DatasetStyle::Scripted, 4);
    let samples: Vec<&PairedSample> = d.samples.iter().step_by(2).collect();
    let mut params = BrewClipParams::new(frozen(), ModelMode::PipelinePrompted, 4);
    params.trainable.insert(LOG_TEMPERATURE, Tensor::scalar(0.0105f64.ln()));
    let batch = batch_of(&samples, &[], ModelMode::PipelinePrompted);
    let schedule = LrSchedule { peak_lr: 1.0, warmup_steps: 0, final_lr: 1.0, total_steps: 10 };
    let mut trainer = Trainer::new(&params, schedule, LossConfig::default(), AdamConfig::default()).unwrap();
    for step in 1..=5 {
        train_step(&mut params, &mut trainer, &batch, step).unwrap();
        assert!(params.tau() >= TAU_MIN * (1.0 - 1e-12) && params.tau() <= TAU_MAX * (1.0 + 1e-12));
    }
}

#[test]
fn toy_training_halves_the_loss() {
    let d = toy_dataset(DatasetStyle::Scripted, 64);
    let samples: Vec<&PairedSample> = d.samples.iter().step_by(2).collect();
    let mut params = BrewClipParams::new(frozen(), ModelMode::Full, 5);
    let latents: Vec<Tensor> = samples.iter().map(|s| params.frozen.audio_latents(&s.audio).unwrap()).collect();
    let batch_all = batch_of(&samples, &latents, ModelMode::Full);
    let schedule = LrSchedule { peak_lr: 1e-2, warmup_steps: 10, final_lr: 1e-3, total_steps: 200 };
    let loss_cfg = LossConfig { alpha: 0.1, batch_size: 64 };
    let mut trainer = Trainer::new(&params, schedule, loss_cfg, AdamConfig::default()).unwrap();
    let start = train_step(&mut params, &mut trainer, &batch_all, 1).unwrap().final_loss;
    let mut last = start;
    for step in 2..=200 {
        last = train_step(&mut params, &mut trainer, &batch_all, step).unwrap().final_loss;
    }
    assert!(last <= 0.5 * start, "loss {start} -> {last}");
}


/// Random images and token strings through a freshly initialized model. The
/// uniform-softmax value 2·ln N only holds while similarities are nearly
/// equal, so the temperature is raised to 1 for the comparison.
#[test]
fn initial_loss_on_random_data_is_near_uniform() {
    let n = 32;
    let uniform = 2.0 * (n as f64).ln();
    for seed in 0..3 {
        let mut params = BrewClipParams::new(frozen(), ModelMode::PipelinePrompted, seed);
        params.trainable.insert(LOG_TEMPERATURE, Tensor::scalar(0.0));
        let cfg = params.config().clone();
        let mut rng = Stream::new(100 + seed);
        let images: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| (0..cfg.n_patches).map(|_| rng.normal_vec(cfg.patch_dim, 1.0)).collect())
            .collect();
        let texts: Vec<Vec<u32>> = (0..n)
            .map(|_| (0..8).map(|_| rng.below(cfg.vocab_size) as u32).collect())
            .collect();
        let batch = Batch {
            images: images.iter().map(Vec::as_slice).collect(),
            texts: texts.iter().map(Vec::as_slice).collect(),
            latents: vec![],
        };
        let mut tape = Tape::new();
        let s = Session::new(&params, false);
        let v = batch_loss(&mut tape, &s, &batch, &LossConfig::default()).unwrap().values(&tape);
        assert!((v.outer - uniform).abs() <= 0.2 * uniform, "seed {seed}: {} vs {uniform}", v.outer);
    }
}
