//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the expensive source
//! training is shared between criteria and the lines come out in order.
//! Exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use polyformer::ablation::ablation_suite;
use polyformer::checkpoint::Checkpoint;
use polyformer::data::{few_shot_split, Benchmark};
use polyformer::metrics::evaluate;
use polyformer::tensor::rng::RngKey;
use polyformer::tensor::Tensor;
use polyformer::train::{
    adapt_phase_c, train_phase_a, train_phase_b, PhaseData, StepRecord, Trainer,
};
use polyformer::{AblationRow, AdvMode, Domain, Phase, PhaseConfig};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const SHOTS: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

/// Source-trained checkpoints and their source-domain dice for one seed.
struct Source {
    seed: u64,
    a: Checkpoint,
    b: Checkpoint,
    dice_a: f64,
    dice_b: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::new(false, format!("panicked: {msg}"))
    })
}

fn cfg(phase: Phase, seed: u64) -> PhaseConfig {
    PhaseConfig {
        shots: SHOTS,
        ..PhaseConfig::new(phase, seed)
    }
}

fn row_cfg(row: AblationRow, seed: u64, steps: Option<u64>) -> PhaseConfig {
    PhaseConfig {
        flags: row.flags(),
        steps,
        ..cfg(Phase::C, seed)
    }
}

fn entry<'a>(ckpt: &'a Checkpoint, name: &str) -> Option<&'a Tensor<f32>> {
    ckpt.model.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

// ---------------------------------------------------------------- criteria

fn identity_insertion(src: &Source) -> Outcome {
    let start = Instant::now();
    let backbone = src.a.build_model().unwrap();
    let inserted = Trainer::phase_b(&src.a, cfg(Phase::B, src.seed))
        .unwrap()
        .model;
    let mut rng = RngKey::new(99).child_str("identity-inputs").rng();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = Tensor::<f32>::from_fn([1, 3, 64, 64], |_| rng.gen_range(0.0..1.0));
        let a = backbone.predict_logits(&x, Domain::Source).unwrap();
        let b = inserted.predict_logits(&x, Domain::Source).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs() as f64);
        }
    }
    let t = secs(start.elapsed());
    Outcome::new(
        worst <= 1e-5 && t < 10.0,
        format!("max |Δlogit| = {worst:.3e} over 10 inputs (≤ 1e-5), {t:.1} s (< 10 s)"),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let results = common::grad_check_suite();
    let t = secs(start.elapsed());
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let failing: Vec<String> = results
        .iter()
        .filter(|r| r.1.is_nan() || r.1 > 1e-4)
        .map(|(n, e)| format!("{n} = {e:.2e}"))
        .collect();
    for (name, err) in &results {
        println!("    grad check {name:<42} {err:.2e}");
    }
    Outcome::new(
        failing.is_empty() && t < 60.0,
        format!(
            "{} checks, worst relative error {worst:.2e} (≤ 1e-4){}, {t:.1} s (< 60 s)",
            results.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failing.join(", "))
            }
        ),
    )
}

/// Parameters whose value differs bitwise from the one they started Phase C
/// with. `k_target` starts as a copy of the trained `k_source`.
fn changed_in_c(b: &Checkpoint, c: &Checkpoint) -> BTreeSet<String> {
    let mut changed = BTreeSet::new();
    for (name, after) in &c.model {
        let origin = name.replace(".k_target", ".k_source");
        let before =
            entry(b, &origin).unwrap_or_else(|| panic!("{origin} missing from phase B checkpoint"));
        if !before.bitwise_eq(after) {
            changed.insert(name.clone());
        }
    }
    changed
}

fn freeze_ledgers(sources: &[Source], data: &Benchmark) -> Outcome {
    let mut problems = Vec::new();
    let mut compared = 0;
    for src in sources {
        for (name, t) in &src.a.model {
            compared += 1;
            match entry(&src.b, name) {
                Some(after) if after.bitwise_eq(t) => {}
                _ => problems.push(format!("seed {}: phase B changed {name}", src.seed)),
            }
        }
    }

    let b = &sources[0].b;
    let is_bn = |n: &str| n.starts_with("backbone.") && n.contains(".bn.");
    let is_k_target = |n: &str| n.starts_with("polyformer.t1.mode") && n.ends_with(".k_target");
    let stat = |n: &str| n.ends_with(".running_mean") || n.ends_with(".running_var");
    let names: Vec<&str> = b.model.iter().map(|(n, _)| n.as_str()).collect();
    let standard: BTreeSet<String> = names
        .iter()
        .filter(|n| is_k_target(n) || is_bn(n))
        .map(|n| n.to_string())
        .collect();
    let no_bn: BTreeSet<String> = names
        .iter()
        .filter(|n| is_k_target(n) || (is_bn(n) && stat(n)))
        .map(|n| n.to_string())
        .collect();

    let (shots, _) = few_shot_split(&data.target, SHOTS, 0).unwrap();
    let mut sizes = Vec::new();
    for (row, expected) in [
        (AblationRow::Standard, &standard),
        (AblationRow::SupKNoBn, &no_bn),
    ] {
        let c = adapt_phase_c(
            b,
            &shots,
            &data.source_train,
            row_cfg(row, 0, Some(20)),
            |_| {},
        )
        .unwrap();
        let changed = changed_in_c(b, &c);
        sizes.push(changed.len());
        for n in expected.symmetric_difference(&changed) {
            let how = if changed.contains(n) {
                "unexpectedly changed"
            } else {
                "unexpectedly unchanged"
            };
            problems.push(format!("{}: {n} {how}", row.label()));
        }
    }
    Outcome::new(
        problems.is_empty(),
        format!(
            "phase B: {compared} backbone tensors bitwise equal over {} seeds; standard changed {} (expected {}); w/o BN changed {} (expected {}){}",
            sources.len(),
            sizes[0],
            standard.len(),
            sizes[1],
            no_bn.len(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn phase_b_parity(sources: &[Source], ab_time: Duration) -> Outcome {
    let gaps: Vec<f64> = sources
        .iter()
        .map(|s| (s.dice_b - s.dice_a).abs())
        .collect();
    for s in sources {
        println!(
            "    seed {}: source dice phase A {:.4}, with polyformer {:.4}",
            s.seed, s.dice_a, s.dice_b
        );
    }
    let m = median(gaps);
    let t = secs(ab_time);
    Outcome::new(
        m <= 0.03 && t < 300.0,
        format!("median |Δ dice| = {m:.4} (≤ 0.03), {t:.0} s for phases A+B (< 300 s)"),
    )
}

fn adaptation_gain(sources: &[Source], data: &Benchmark, ab_time: Duration) -> Outcome {
    let start = Instant::now();
    let mut gains = Vec::new();
    for src in sources {
        let (shots, held_out) = few_shot_split(&data.target, SHOTS, src.seed).unwrap();
        let before =
            evaluate(&src.b.build_model().unwrap(), &held_out, Domain::Source, "").unwrap();
        let c = adapt_phase_c(
            &src.b,
            &shots,
            &data.source_train,
            row_cfg(AblationRow::SupK, src.seed, None),
            |_| {},
        )
        .unwrap();
        let after = evaluate(&c.build_model().unwrap(), &held_out, Domain::Target, "").unwrap();
        println!(
            "    seed {}: target dice unadapted {:.4}, after L_sup + K {:.4}",
            src.seed, before.mean, after.mean
        );
        gains.push(after.mean - before.mean);
    }
    let m = median(gains);
    let t = secs(ab_time + start.elapsed());
    Outcome::new(
        m >= 0.05 && t < 600.0,
        format!("median gain {m:+.4} (≥ 0.05), {t:.0} s including source training (< 600 s)"),
    )
}

fn ablation_integrity(src: &Source, data: &Benchmark) -> Outcome {
    let start = Instant::now();
    let table = ablation_suite(
        &src.b,
        &data.target,
        &data.source_train,
        &cfg(Phase::C, 0),
        &[0],
        |name| {
            println!("    ablation row done: {name}");
        },
    )
    .unwrap();
    for line in table.to_text().lines() {
        println!("    {line}");
    }
    let adapted: Vec<_> = table.rows.iter().filter(|r| r.row.is_some()).collect();
    let all_rows = AblationRow::ALL.iter().all(|r| table.row(*r).is_some());
    let violations: Vec<&str> = adapted
        .iter()
        .filter(|r| !r.ledger_ok)
        .map(|r| r.name.as_str())
        .collect();
    let note = table.ordering_note();
    Outcome::new(
        adapted.len() == 6 && all_rows && violations.is_empty() && table.baseline().is_some(),
        format!(
            "{} adaptation rows + baseline, ledger violations: {:?}; {note}; {:.0} s",
            adapted.len(),
            violations,
            secs(start.elapsed())
        ),
    )
}

fn grl_contract() -> Outcome {
    let mut worst_gen = 0.0f64;
    let mut worst_disc = 0.0f64;
    let mut lines = Vec::new();
    for mode in [AdvMode::Features, AdvMode::Masks] {
        for lambda in [1.0, 0.35] {
            let (gen, disc, count) = common::grl_deviation(mode, lambda);
            worst_gen = worst_gen.max(gen);
            worst_disc = worst_disc.max(disc);
            lines.push(format!("{mode:?} λ={lambda}: {count} generator tensors"));
        }
    }
    Outcome::new(
        worst_gen <= 1e-6 && worst_disc == 0.0,
        format!(
            "generator deviation from −λ·g {worst_gen:.2e} (≤ 1e-6), discriminator deviation {worst_disc:.1e}; {}",
            lines.join(", ")
        ),
    )
}

fn determinism(src: &Source, data: &Benchmark) -> Outcome {
    let mut problems = Vec::new();
    let short = |phase, seed| PhaseConfig {
        steps: Some(10),
        ..cfg(phase, seed)
    };

    let a1 = train_phase_a(&data.source_train, short(Phase::A, 7), |_| {}).unwrap();
    let a2 = train_phase_a(&data.source_train, short(Phase::A, 7), |_| {}).unwrap();
    if a1.encode() != a2.encode() {
        problems.push("phase A checkpoints differ for equal seeds".to_string());
    }
    let (shots, _) = few_shot_split(&data.target, SHOTS, 0).unwrap();
    let standard = row_cfg(AblationRow::Standard, 0, Some(10));
    let pd = PhaseData {
        source: &data.source_train,
        target: &shots,
    };
    let c1 = adapt_phase_c(&src.b, &shots, &data.source_train, standard.clone(), |_| {}).unwrap();
    let c2 = adapt_phase_c(&src.b, &shots, &data.source_train, standard.clone(), |_| {}).unwrap();
    if c1.encode() != c2.encode() {
        problems.push("phase C checkpoints differ for equal seeds".to_string());
    }

    let dir = tempfile::tempdir().unwrap();
    let mut roundtrips = 0;
    for (i, ckpt) in [&src.a, &src.b, &c1].into_iter().enumerate() {
        let p1 = dir.path().join(format!("{i}-first.pfrm"));
        let p2 = dir.path().join(format!("{i}-second.pfrm"));
        ckpt.save(&p1).unwrap();
        Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
        if std::fs::read(&p1).unwrap() != std::fs::read(&p2).unwrap() {
            problems.push(format!("save→load→save differs for checkpoint {i}"));
        }
        roundtrips += 1;
    }

    let mut resumes = 0;
    for (label, start_from, config) in [
        ("phase A", None, short(Phase::A, 3)),
        ("phase C standard", Some(&src.b), standard),
    ] {
        let fresh = || match start_from {
            None => Trainer::phase_a(config.clone()).unwrap(),
            Some(b) => Trainer::phase_c(b, config.clone()).unwrap(),
        };
        let mut straight = fresh();
        let mut log_a: Vec<StepRecord> = Vec::new();
        straight.run(pd, |r| log_a.push(r.clone())).unwrap();

        let mut first = fresh();
        let mut log_b: Vec<StepRecord> = Vec::new();
        first
            .run_until(5, pd, &mut |r| log_b.push(r.clone()))
            .unwrap();
        let path = dir.path().join("resume.pfrm");
        first.checkpoint().save(&path).unwrap();
        let mut resumed =
            Trainer::resume(&Checkpoint::load(&path).unwrap(), config.clone()).unwrap();
        resumed.run(pd, |r| log_b.push(r.clone())).unwrap();
        if log_a.len() != 10
            || log_a != log_b
            || straight.checkpoint().encode() != resumed.checkpoint().encode()
        {
            problems.push(format!(
                "{label}: resume after 5 steps diverges from a straight 10-step run"
            ));
        }
        resumes += 1;
    }
    Outcome::new(
        problems.is_empty(),
        format!(
            "repeat runs identical (A, C), {roundtrips} save→load→save byte-identical, {resumes} resumes bitwise equal over 10 steps{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn attention_normalisation() -> Outcome {
    let mut rng = RngKey::new(5).child_str("attention-cases").rng();
    let mut cases: Vec<(usize, usize)> = vec![(1, 1), (12, 4), (4096, 16)];
    cases.extend((0..20).map(|_| (rng.gen_range(1..600), rng.gen_range(1..24))));
    let (mut w1, mut w2) = (0.0f64, 0.0f64);
    for (i, &(n, m)) in cases.iter().enumerate() {
        let (a, b) = common::attention_sums(n, m, i as u64);
        w1 = w1.max(a);
        w2 = w2.max(b);
    }
    Outcome::new(
        w1 <= 1e-6 && w2 <= 1e-6,
        format!(
            "{} random cases, all maps N×M; worst column sum error {w1:.2e}, worst row sum error {w2:.2e} (≤ 1e-6)",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------- driver

fn train_sources(data: &Benchmark) -> Vec<Source> {
    SEEDS
        .iter()
        .map(|&seed| {
            let a = train_phase_a(&data.source_train, cfg(Phase::A, seed), |_| {}).unwrap();
            let b = train_phase_b(&a, &data.source_train, cfg(Phase::B, seed), |_| {}).unwrap();
            let score = |c: &Checkpoint| {
                evaluate(
                    &c.build_model().unwrap(),
                    &data.source_eval,
                    Domain::Source,
                    "",
                )
                .unwrap()
                .mean
            };
            let (dice_a, dice_b) = (score(&a), score(&b));
            println!("    source training seed {seed} done");
            Source {
                seed,
                a,
                b,
                dice_a,
                dice_b,
            }
        })
        .collect()
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {n}: {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report(2, "gradient correctness", guarded(gradient_correctness));
    report(7, "GRL contract", guarded(grl_contract));
    report(
        9,
        "attention normalisation",
        guarded(attention_normalisation),
    );

    let data = Benchmark::default_pair();
    let start = Instant::now();
    let sources = catch_unwind(AssertUnwindSafe(|| train_sources(&data)));
    let ab_time = start.elapsed();
    match &sources {
        Ok(sources) => {
            report(
                1,
                "identity insertion",
                guarded(|| identity_insertion(&sources[0])),
            );
            report(
                3,
                "freeze ledgers",
                guarded(|| freeze_ledgers(sources, &data)),
            );
            report(
                4,
                "phase B parity",
                guarded(|| phase_b_parity(sources, ab_time)),
            );
            report(
                5,
                "adaptation gain",
                guarded(|| adaptation_gain(sources, &data, ab_time)),
            );
            report(
                8,
                "determinism and persistence",
                guarded(|| determinism(&sources[0], &data)),
            );
            report(
                6,
                "ablation suite integrity",
                guarded(|| ablation_integrity(&sources[0], &data)),
            );
        }
        Err(_) => {
            for (n, name) in [
                (1, "identity insertion"),
                (3, "freeze ledgers"),
                (4, "phase B parity"),
                (5, "adaptation gain"),
                (8, "determinism and persistence"),
                (6, "ablation suite integrity"),
            ] {
                report(n, name, Outcome::new(false, "source training failed"));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary ({:.0} s):", secs(total.elapsed()));
    for (n, name, o) in &results {
        println!(
            "criterion {n}: {} {name}",
            if o.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
