use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coseg::coseg::{cosegment_prepared, prepare_set, ClassifierInput, CosegConfig};
use coseg::data::{synth_shape, Family, ShapeSet, SynthSpec};
use coseg::encoders::{msg_encode, EncoderConfig, EncoderWeights, FeatureKind, PreparedCloud};
use coseg::par;
use coseg::prior::PriorWeights;

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn encoder(c: &mut Criterion) {
    let (cloud, _) = synth_shape(&SynthSpec::new(Family::ChairLike, 512, 0)).unwrap();
    let config = EncoderConfig::default();
    let prep = PreparedCloud::new(&cloud, &config).unwrap();
    let w = EncoderWeights::init(FeatureKind::Msg, config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = c.benchmark_group("msg_encode_512");
    for (name, seq) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| msg_encode(&prep, &w).unwrap())
        });
    }
    g.finish();
    par::set_sequential(false);
}

fn coseg_iterations(c: &mut Criterion) {
    let specs: Vec<_> = (0..8).map(|s| SynthSpec::new(Family::ChairLike, 256, s)).collect();
    let set = ShapeSet::from_synth(&specs).unwrap();
    let prior = PriorWeights::init(&EncoderConfig::default(), 0).unwrap();
    let feats = prepare_set(&set, &prior, ClassifierInput::Mrg).unwrap();
    let cfg = CosegConfig {
        max_iters: 5,
        ..Default::default()
    };
    let mut g = c.benchmark_group("coseg_5_iters_8x256");
    g.sample_size(10);
    for (name, seq) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| cosegment_prepared(&feats, &prior, &cfg).unwrap())
        });
    }
    g.finish();
    par::set_sequential(false);
}

criterion_group!(benches, encoder, coseg_iterations);
criterion_main!(benches);
