use std::hint::black_box;

use brewclip_bench::{random_matrix, scripted};
use brewclip_core::data::{compute_wer, PairedSample, Split};
use brewclip_core::encoders::{EncoderConfig, FrozenEncoderSet};
use brewclip_core::eval::{recall_at_k, similarity_matrix, Direction, RecallRule};
use brewclip_core::model::{info_nce_value, train_step, Batch, BrewClipParams, LossConfig, ModelMode, Trainer};
use brewclip_core::numerics::{AdamConfig, LrSchedule, Tape};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn matmul_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_backward");
    for n in [16, 64] {
        let a = random_matrix(1, n, n);
        let b = random_matrix(2, n, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.param(a.clone());
                let y = tape.param(b.clone());
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z).unwrap();
                tape.backward(s).unwrap();
                black_box(tape.grad(x).unwrap()[0])
            })
        });
    }
    group.finish();
}

fn losses(c: &mut Criterion) {
    let x = random_matrix(3, 32, 32);
    let y = random_matrix(4, 32, 32);
    c.bench_function("info_nce_32x32", |b| b.iter(|| info_nce_value(black_box(&x), black_box(&y), 0.07).unwrap()));
}

fn encoders(c: &mut Criterion) {
    let set = FrozenEncoderSet::init(&EncoderConfig::default(), 1).unwrap();
    let data = scripted(32);
    let samples: Vec<&PairedSample> = data.samples.iter().step_by(2).collect();
    let images: Vec<&[Vec<f64>]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let texts: Vec<&[u32]> = samples.iter().map(|s| s.caption.as_slice()).collect();
    c.bench_function("encode_images_32", |b| b.iter(|| set.encode_images(black_box(&images)).unwrap()));
    c.bench_function("encode_texts_32", |b| b.iter(|| set.encode_texts(black_box(&texts)).unwrap()));
    c.bench_function("audio_latents_1", |b| b.iter(|| set.audio_latents(black_box(&samples[0].audio)).unwrap()));
}

fn training(c: &mut Criterion) {
    let set = FrozenEncoderSet::init(&EncoderConfig::default(), 1).unwrap();
    let data = scripted(64);
    let samples: Vec<&PairedSample> = data.split(Split::Train).into_iter().step_by(2).take(32).collect();
    let mut group = c.benchmark_group("train_step_32");
    group.sample_size(10);
    for mode in [ModelMode::PipelinePrompted, ModelMode::Full] {
        let latents: Vec<_> = samples.iter().map(|s| set.audio_latents(&s.audio).unwrap()).collect();
        let batch = Batch {
            images: samples.iter().map(|s| s.image.as_slice()).collect(),
            texts: samples.iter().map(|s| s.transcription.as_deref().unwrap()).collect(),
            latents: if mode.uses_acoustic() { latents.iter().collect() } else { vec![] },
        };
        group.bench_function(mode.name(), |b| {
            let mut params = BrewClipParams::new(set.clone(), mode, 2);
            let schedule = LrSchedule { peak_lr: 1e-3, warmup_steps: 1, final_lr: 1e-5, total_steps: 1_000_000 };
            let mut trainer = Trainer::new(&params, schedule, LossConfig::default(), AdamConfig::default()).unwrap();
            let mut step = 0;
            b.iter(|| {
                step += 1;
                train_step(&mut params, &mut trainer, &batch, step).unwrap()
            })
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let a = random_matrix(5, 500, 32);
    let v = random_matrix(6, 100, 32);
    let truth: Vec<usize> = (0..500).map(|i| i / 5).collect();
    c.bench_function("similarity_500x100", |b| b.iter(|| similarity_matrix(black_box(&a), black_box(&v)).unwrap()));
    let s = similarity_matrix(&a, &v).unwrap();
    for dir in [Direction::SpeechToImage, Direction::ImageToSpeech] {
        c.bench_function(&format!("recall_at_10_{dir:?}"), |b| {
            b.iter(|| recall_at_k(black_box(&s), &truth, 10, dir, RecallRule::AnyCaption).unwrap())
        });
    }
    let reference: Vec<u32> = (0..40).map(|i| i % 17).collect();
    let hypothesis: Vec<u32> = (0..44).map(|i| (i * 3) % 17).collect();
    c.bench_function("wer_40_tokens", |b| b.iter(|| compute_wer(black_box(&reference), black_box(&hypothesis)).unwrap()));
}

criterion_group!(benches, matmul_backward, losses, encoders, training, scoring);
criterion_main!(benches);
