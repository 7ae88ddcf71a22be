//! Rayon against sequential execution on the three data-parallel hot paths.
//!
//! Within one build the `one_thread` variants pin work to a single worker.
//! To compare against the fully sequential code path, save a baseline and
//! rebuild without the feature:
//!
//!     cargo bench -p flowstate -- --save-baseline rayon
//!     cargo bench -p flowstate --no-default-features -- --baseline rayon

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowstate::forecast::{forecast, Mode, TaskSpec};
use flowstate::model::{Model, ModelConfig};
use flowstate::par;
use flowstate::scan::{scan_diag, ComplexVec};
use flowstate::tensor::Mat;
use flowstate::train::{batch_loss_and_grads, TrainItem};

fn model() -> Model {
    Model::init(ModelConfig {
        num_layers: 2,
        state_size: 16,
        hidden_size: 24,
        mlp_size: 48,
        context_length: 144,
        min_context: 20,
        t_base: 24,
        basis_n: 12,
        init_seed: 1,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn wave(len: usize, phase: f64) -> Vec<f64> {
    (0..len).map(|t| 5.0 + (t as f64 * 0.26 + phase).sin() + 0.3 * (t as f64 * 0.07).cos()).collect()
}

fn label() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

/// Runs `f` as-is and, in parallel builds, inside a one-thread pool.
fn both<F: Fn() + Sync>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter(label()), |b| b.iter(&f));
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::from_parameter("one_thread"), |b| b.iter(|| pool.install(&f)));
    }
    g.finish();
}

fn batch_gradient(c: &mut Criterion) {
    let m = model();
    let items: Vec<TrainItem> = (0..8).map(|i| TrainItem::new(wave(168, i as f64), 144).unwrap()).collect();
    both(c, "batch_gradient", || {
        std::hint::black_box(batch_loss_and_grads(&m, &items, true).unwrap());
    });
}

fn multichannel_forecast(c: &mut Criterion) {
    let m = model();
    let channels = 8;
    let mut hist = Mat::zeros(144, channels);
    for ch in 0..channels {
        for (t, v) in wave(144, ch as f64).into_iter().enumerate() {
            hist.row_mut(t)[ch] = v;
        }
    }
    let task = TaskSpec::new(24.0, 72);
    both(c, "multichannel_forecast", || {
        std::hint::black_box(forecast(&m, &hist, &task, Mode::Mpi).unwrap());
    });
}

fn scans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (l, p) = (4096, 64);
    let a = ComplexVec::new(
        (0..p).map(|_| rng.random_range(0.5..0.99)).collect(),
        (0..p).map(|_| rng.random_range(-0.1..0.1)).collect(),
    )
    .unwrap();
    let drives: Vec<(Vec<f64>, Vec<f64>)> = (0..8)
        .map(|_| {
            (
                (0..l * p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..l * p).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        })
        .collect();
    both(c, "scan_batch", || {
        std::hint::black_box(par::map_collect(&drives, |(re, im)| scan_diag(&a, re, im).unwrap()));
    });
}

criterion_group!(benches, batch_gradient, multichannel_forecast, scans);
criterion_main!(benches);
