//! One worker (sequential path) against all cores on the same synthetic cohort.

use claimhorizon::rules::parse_rules;
use claimhorizon::sensitivity::horizon_sweep;
use claimhorizon::synth::{generate_cohort, SynthSpec};
use claimhorizon::{classify_all, PatientBundle, RuleSet};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn cohort(n: u64) -> (RuleSet, Vec<PatientBundle>) {
    let rs = parse_rules(include_str!("../../../rules/covid19.json")).unwrap();
    let spec = SynthSpec::from_json(&format!(
        r#"{{"seed": 7, "n_matched": {n}, "n_no_anchor": {n}, "n_anchor_no_admission": {n}, "n_failed_validation": {n},
            "noise_events_per_patient": 8,
            "offset_distribution": [{{"offset": -1, "weight": 1}}, {{"offset": 0, "weight": 2}}, {{"offset": 3, "weight": 1}}]}}"#
    ))
    .unwrap();
    let bundles = generate_cohort(&spec, &rs).unwrap().into_iter().map(|p| p.bundle).collect();
    (rs, bundles)
}

fn bench_classify(c: &mut Criterion) {
    let (rs, bundles) = cohort(5_000);
    let mut group = c.benchmark_group("classify_all");
    group.throughput(Throughput::Elements(bundles.len() as u64));
    for workers in [1, 0] {
        let label = if workers == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &workers, |b, &w| {
            b.iter(|| classify_all(&bundles, &rs, w))
        });
    }
    group.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let (rs, bundles) = cohort(1_000);
    let lo: Vec<i32> = (-7..=0).collect();
    let hi: Vec<i32> = (0..=21).step_by(3).collect();
    c.bench_function("horizon_sweep", |b| b.iter(|| horizon_sweep(&bundles, &rs, &lo, &hi)));
}

criterion_group!(benches, bench_classify, bench_sweep);
criterion_main!(benches);
