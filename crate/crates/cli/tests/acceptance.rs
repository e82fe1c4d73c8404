//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line with
//! the measured values; the test fails if any criterion fails.
//!
//! Run with `cargo test --release -p fedcac-cli --test acceptance -- --nocapture`
//! to see the report. Debug builds work too, just slower.

use std::fs;

use fedcac_cli::{cmd_run, CommonArgs};
use fedcac_core::mask::{self, CriticalMask, MaskLayer};
use fedcac_core::nn::{self, Activation, Batch, LayerKind, MlpSpec, ParameterSet};
use fedcac_core::orchestrator::{self, overlap_similarity_study, planted_simulation, OverlapStudy, PairType};
use fedcac_core::server::{self, OverlapMatrix};
use fedcac_core::{Algorithm, Collaboration, RunConfig, Selector, Simulation};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dims: usize, classes: usize) -> (Array2<f64>, Vec<usize>) {
    let x = Array2::from_shape_fn((rows, dims), |_| rng.random_range(-2.0..2.0));
    let y = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

// 1. Analytic gradients against central differences.
fn gradients() -> Outcome {
    let shapes: [&[usize]; 4] = [&[3, 5, 4], &[4, 6, 5, 3], &[2, 3], &[5, 4, 4, 2]];
    let pairs = 24;
    let mut worst: f64 = 0.0;
    for seed in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let widths = shapes[seed as usize % shapes.len()].to_vec();
        let activation = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = MlpSpec::new(widths.clone(), activation, seed % 3 == 0).unwrap();
        let mut model = spec.init(&mut rng);
        for l in model.layers_mut() {
            if l.kind == LayerKind::Trainable && !l.name.ends_with(".weight") {
                l.values.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let (x, y) = random_batch(&mut rng, 6, widths[0], *widths.last().unwrap());
        let batch = Batch::new(x.view(), &y).unwrap();
        let (_, grad) = nn::loss_and_grad(&model, &spec, &batch).unwrap();
        let h = 1e-5;
        for idx in model.indices().collect::<Vec<_>>() {
            if model.layers()[idx.layer].kind != LayerKind::Trainable {
                continue;
            }
            let v = model.get(idx).unwrap();
            let mut plus = model.clone();
            plus.set(idx, v + h).unwrap();
            let mut minus = model.clone();
            minus.set(idx, v - h).unwrap();
            let numeric = (nn::loss(&plus, &spec, &batch).unwrap() - nn::loss(&minus, &spec, &batch).unwrap()) / (2.0 * h);
            let analytic = grad.get(idx).unwrap();
            let scale = analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    outcome(worst < 1e-4, format!("{pairs} (model, batch) pairs, max relative error {worst:.2e} (limit 1e-4)"))
}

fn top_fraction(values: &[f64], frac: f64) -> Vec<usize> {
    let k = ((values.len() as f64 * frac).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

// 2. Update-based sensitivity against the exact loss change from zeroing.
fn approximation() -> Outcome {
    let spec = MlpSpec::new(vec![4, 12, 3], Activation::Tanh, false).unwrap();
    let mut agreements = Vec::new();
    let mut params = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = spec.init(&mut rng);
        params = start.total_count();
        let (x, y) = random_batch(&mut rng, 60, 4, 3);
        let mut end = start.clone();
        for chunk in (0..60).collect::<Vec<_>>().chunks(10) {
            let xb = x.select(ndarray::Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            nn::train_step(&mut end, &spec, &Batch::new(xb.view(), &yb).unwrap(), 0.1).unwrap();
        }
        let approx: Vec<f64> = mask::compute_sensitivity(&start, &end)
            .unwrap()
            .layers()
            .iter()
            .flat_map(|l| l.values.clone())
            .collect();
        // Oracle: re-run the loss with each parameter zeroed.
        let batch = Batch::new(x.view(), &y).unwrap();
        let base = nn::loss(&end, &spec, &batch).unwrap();
        let exact: Vec<f64> = end
            .indices()
            .collect::<Vec<_>>()
            .into_iter()
            .map(|idx| {
                let mut zeroed = end.clone();
                zeroed.set(idx, 0.0).unwrap();
                (nn::loss(&zeroed, &spec, &batch).unwrap() - base).abs()
            })
            .collect();
        let a = top_fraction(&approx, 0.1);
        let e = top_fraction(&exact, 0.1);
        agreements.push(a.iter().filter(|i| e.contains(i)).count() as f64 / a.len() as f64);
    }
    let min = agreements.iter().copied().fold(1.0, f64::min);
    outcome(
        params <= 500 && min >= 0.5,
        format!("{params} parameters, top-10% agreement per seed {agreements:?} (each >= 0.5)"),
    )
}

fn small(algorithm: Algorithm, seed: u64) -> RunConfig {
    let mut c = RunConfig {
        algorithm,
        clients: 4,
        rounds: 5,
        beta: 3.0,
        seed,
        ..RunConfig::default()
    };
    c.model.norm = false;
    c
}

// 3. tau = 0 reduces to FedAvg exactly.
fn zero_tau() -> Outcome {
    let mut identical = 0;
    for seed in SEEDS {
        let a = orchestrator::run(&RunConfig { tau: 0.0, ..small(Algorithm::Fedcac, seed) }).unwrap();
        let b = orchestrator::run(&small(Algorithm::Fedavg, seed)).unwrap();
        let ha: Vec<u64> = a.history.iter().map(|m| m.mean_accuracy.to_bits()).collect();
        let hb: Vec<u64> = b.history.iter().map(|m| m.mean_accuracy.to_bits()).collect();
        identical += usize::from(ha == hb && ha.len() == 5);
    }
    outcome(identical == SEEDS.len(), format!("4 clients, 5 rounds: bit-identical histories on {identical}/{} seeds", SEEDS.len()))
}

// 4. Past beta every client trains on its own.
fn independent_regime() -> Outcome {
    let config = RunConfig { clients: 6, rounds: 6, beta: 3.0, ..RunConfig::default() };
    let mut sim = Simulation::new(config).unwrap();
    let mut checked = 0;
    let mut ok = true;
    while !sim.is_finished() {
        let rec = sim.step().unwrap();
        let t = rec.metrics.round;
        if t <= 3 {
            continue;
        }
        let plan = rec.plan.unwrap();
        let stats = plan.stats.unwrap();
        ok &= plan.collaborators.iter().all(|c| c.is_empty());
        ok &= stats.threshold > stats.o_max;
        for (u, w) in plan.custom_models.iter().zip(&rec.trained) {
            ok &= u == w;
            checked += 1;
        }
    }
    outcome(ok && checked == 18, format!("6 clients, beta 3, T 6: {checked} (client, round) pairs past beta, empty sets and u == w: {ok}"))
}

// 5. Threshold schedule on a fixed overlap matrix.
fn threshold_schedule() -> Outcome {
    let rows = [
        vec![1.0, 0.9, 0.7, 0.55, 0.8],
        vec![0.9, 1.0, 0.75, 0.6, 0.65],
        vec![0.7, 0.75, 1.0, 0.95, 0.5],
        vec![0.55, 0.6, 0.95, 1.0, 0.85],
        vec![0.8, 0.65, 0.5, 0.85, 1.0],
    ];
    let overlap = OverlapMatrix::from_rows(rows.to_vec()).unwrap();
    let beta = 7.0;
    // Oracle mean over ordered off-diagonal pairs.
    let off: Vec<f64> = (0..5).flat_map(|i| (0..5).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| rows[i][j]).collect();
    let o_avg = mean(&off);
    let o_max = off.iter().copied().fold(0.0, f64::max);
    let mut prev_threshold = f64::NEG_INFINITY;
    let mut prev_sizes = [usize::MAX; 5];
    let mut ok = true;
    for t in 1..=10usize {
        let (stats, sets) = server::time_varying_collaborators(&overlap, t, beta).unwrap();
        ok &= stats.threshold >= prev_threshold;
        ok &= (stats.threshold - (o_avg + (t as f64 / beta) * (o_max - o_avg))).abs() < 1e-15;
        if t == 7 {
            ok &= stats.threshold == o_max;
        }
        for (i, s) in sets.iter().enumerate() {
            ok &= s.len() <= prev_sizes[i];
            prev_sizes[i] = s.len();
        }
        prev_threshold = stats.threshold;
    }
    outcome(ok, format!("5x5 matrix, beta 7, t = 1..10: non-decreasing, equals o_max {o_max} at t = beta, set sizes non-increasing: {ok}"))
}

// 6. Mask wire format.
fn wire_format() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut round_trips = 0;
    for _ in 0..1000 {
        let layers = (0..rng.random_range(1..6))
            .map(|_| MaskLayer {
                kind: LayerKind::Trainable,
                bits: (0..rng.random_range(0..300)).map(|_| rng.random_bool(0.5)).collect(),
            })
            .collect();
        let m = CriticalMask::new(layers, None);
        let bytes = mask::serialize_mask(&m);
        round_trips += usize::from(mask::deserialize_mask(&bytes).unwrap() == m);
    }
    let n = 10_000;
    let single = CriticalMask::new(vec![MaskLayer { kind: LayerKind::Trainable, bits: vec![true; n] }], None);
    let payload = mask::serialize_mask(&single).len();
    let header = 8;
    let ratio = payload as f64 / (4 * n) as f64;
    let header_share = header as f64 / payload as f64;
    outcome(
        round_trips == 1000 && payload == n.div_ceil(8) + header && (ratio - 0.03).abs() < 0.005 && header_share < 0.01,
        format!(
            "{round_trips}/1000 round trips; n = {n}: {payload} bytes = {} + {header} header, {:.2}% of a 32-bit model, header {:.2}%",
            n.div_ceil(8),
            100.0 * ratio,
            100.0 * header_share
        ),
    )
}

fn mean_best(config: &RunConfig) -> f64 {
    mean(&SEEDS.map(|seed| orchestrator::run(&RunConfig { seed, ..config.clone() }).unwrap().best_accuracy))
}

fn mean_final(config: &RunConfig) -> f64 {
    mean(&SEEDS.map(|seed| orchestrator::run(&RunConfig { seed, ..config.clone() }).unwrap().final_accuracy()))
}

fn desk_scale() -> RunConfig {
    let c = RunConfig::default();
    assert_eq!((c.clients, c.rounds, c.local_epochs, c.data.classes, c.data.dims), (16, 60, 5, 8, 16));
    assert_eq!(c.partition.classes_per_client, 2);
    c
}

// 7. FedCAC >= Separate >= FedAvg.
fn ordering() -> Outcome {
    let base = desk_scale();
    let fedcac = mean_best(&base);
    let separate = mean_best(&RunConfig { algorithm: Algorithm::Separate, ..base.clone() });
    let fedavg = mean_best(&RunConfig { algorithm: Algorithm::Fedavg, ..base });
    outcome(
        fedcac >= separate && separate >= fedavg && fedcac - fedavg >= 0.05,
        format!("mean best over 3 seeds: fedcac {fedcac:.4}, separate {separate:.4}, fedavg {fedavg:.4}, gap {:.4} (>= 0.05)", fedcac - fedavg),
    )
}

// 8. Selector ordering with critical parameters kept local.
fn selectors() -> Outcome {
    let base = RunConfig { collaboration: Collaboration::None, ..desk_scale() };
    let [s, r, v] = [Selector::Sensitivity, Selector::Random, Selector::SensitivityReverse]
        .map(|selector| mean_final(&RunConfig { selector, ..base.clone() }));
    outcome(
        s >= r && r >= v,
        format!("mean final over 3 seeds: sensitivity {s:.4}, random {r:.4}, reverse {v:.4}"),
    )
}

// 9. Same-distribution pairs overlap more than disjoint pairs.
fn overlap_property() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let rows = overlap_similarity_study(&RunConfig { rounds: 10, seed, ..desk_scale() }, OverlapStudy::default()).unwrap();
        let get = |t: PairType| rows.iter().find(|r| r.pair_type == t).unwrap().mean_overlap;
        let (same, disjoint) = (get(PairType::SameDistribution), get(PairType::Disjoint));
        ok &= same > disjoint;
        parts.push(format!("seed {seed}: {same:.4} > {disjoint:.4}"));
    }
    outcome(ok, format!("10 rounds, same vs disjoint: {}", parts.join("; ")))
}

fn angle_between(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (dot / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees()
}

// 10. Updates of disjoint-class clients diverge over training under FedAvg.
fn angle_direction() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let mut config = RunConfig { algorithm: Algorithm::Fedavg, lr: 0.01, seed, ..desk_scale() };
        config.model.activation = Activation::Tanh;
        let (mut sim, sets) = planted_simulation(&config, OverlapStudy::default()).unwrap();
        let (a, b) = (0, 4);
        assert!(sets[a].iter().all(|c| !sets[b].contains(c)));
        let mut angles = Vec::new();
        while !sim.is_finished() {
            let start = sim.clients()[a].model.clone();
            debug_assert!(start == sim.clients()[b].model);
            let rec = sim.step().unwrap();
            // Update direction = trained model minus the shared starting model.
            let delta = |m: &ParameterSet| -> Vec<f64> {
                m.flatten_trainable().iter().zip(start.flatten_trainable()).map(|(e, s)| e - s).collect()
            };
            angles.push(angle_between(&delta(&rec.trained[a]), &delta(&rec.trained[b])));
        }
        let k = angles.len() / 5;
        let first = mean(&angles[..k]);
        let last = mean(&angles[angles.len() - k..]);
        ok &= last > first;
        parts.push(format!("seed {seed}: {first:.2} -> {last:.2} deg"));
    }
    outcome(ok, format!("clients 0 and 4, first vs last 20% of rounds: {}", parts.join("; ")))
}

// 11. An interior tau beats both extremes.
fn tau_sweep() -> Outcome {
    let base = desk_scale();
    let taus = [0.05, 0.3, 0.5, 0.7, 0.95];
    let best: Vec<f64> = taus.iter().map(|&tau| mean_best(&RunConfig { tau, ..base.clone() })).collect();
    let interior = best[1..taus.len() - 1].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (best[0], best[taus.len() - 1]);
    let listing: Vec<String> = taus.iter().zip(&best).map(|(t, b)| format!("{t}: {b:.4}")).collect();
    outcome(interior > lo && interior > hi, format!("mean best over 3 seeds, {}", listing.join(", ")))
}

// 12. cmd_run output does not depend on the worker count.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    fs::write(&config, "rounds = 10\nseed = 11\n").unwrap();
    let run = |out: &str, workers: usize| {
        let args = CommonArgs {
            config: config.clone(),
            out: Some(dir.path().join(out)),
            workers: Some(workers),
            ..CommonArgs::default()
        };
        cmd_run(&args).unwrap();
        fs::read(dir.path().join(out).join("history.jsonl")).unwrap()
    };
    let a = run("w1a", 1);
    let b = run("w1b", 1);
    let c = run("w4", 4);
    outcome(
        !a.is_empty() && a == b && a == c,
        format!("history.jsonl ({} bytes) identical for workers 1, 1, 4: {}", a.len(), a == b && a == c),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, Check); 12] = [
        ("gradient correctness", gradients),
        ("sensitivity approximation vs exact", approximation),
        ("tau = 0 equals fedavg", zero_tau),
        ("independent training past beta", independent_regime),
        ("threshold schedule", threshold_schedule),
        ("mask wire format", wire_format),
        ("fedcac >= separate >= fedavg", ordering),
        ("selector ordering", selectors),
        ("overlap tracks distribution similarity", overlap_property),
        ("update angle grows under fedavg", angle_direction),
        ("interior tau is best", tau_sweep),
        ("determinism across workers", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("[{status}] {:>2}. {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
