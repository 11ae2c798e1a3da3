use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use idcnn_bench::{bilstm, idcnn, sequence};
use idcnn_core::crf::{viterbi, CrfScores};
use idcnn_core::Tensor;
use std::hint::black_box;

fn encoders(c: &mut Criterion) {
    let models = [
        ("idcnn", idcnn(false)),
        ("bilstm", bilstm(false)),
        ("idcnn-crf", idcnn(true)),
        ("bilstm-crf", bilstm(true)),
    ];
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for t in [32, 128, 512] {
        let (ids, shapes) = sequence(t, 0);
        group.throughput(Throughput::Elements(t as u64));
        for (name, model) in &models {
            group.bench_with_input(BenchmarkId::new(*name, t), &t, |b, _| {
                b.iter(|| model.predict(black_box(&ids), black_box(&shapes)).unwrap())
            });
        }
    }
    group.finish();
}

fn crf_decode(c: &mut Criterion) {
    let d = 17;
    let trans: Vec<f64> = (0..d * d).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
    let scores = CrfScores::new(&trans, d);
    let mut group = c.benchmark_group("viterbi");
    for t in [32, 256, 1024] {
        let x = Tensor::matrix(t, d, (0..t * d).map(|i| ((i * 13) % 17) as f64 / 17.0).collect()).unwrap();
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::from_parameter(t), &x, |b, x| {
            b.iter(|| viterbi(black_box(x), &scores))
        });
    }
    group.finish();
}

criterion_group!(benches, encoders, crf_decode);
criterion_main!(benches);
