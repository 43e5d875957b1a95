//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dxagent_core::coordinator::{coordinate_average, coordinate_llm, coordinate_vote, FallbackStrategy};
use dxagent_core::eval::{compute_metrics, run_repeated, RepeatedTable, RowKind, SynthConfig};
use dxagent_core::llm::{ChatBackend, RuleChat, ScriptedChat};
use dxagent_core::nifti::{self, Endianness, NiftiError, NiftiHeader, HEADER_SIZE};
use dxagent_core::par::Execution;
use dxagent_core::registry::{reference_manifests, RegistryError};
use dxagent_core::{
    ClassDistribution, CoordinationStrategy, Engine, Modality, ModelOutcome, Query, SessionState, Stage, TaskKind,
    ToolInvoker, ToolRegistry,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tie tolerance used by both the implementation and the oracles.
const EPS: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(cond: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok: cond,
        detail: detail.into(),
    }
}

fn report(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (mut ok, mut detail) = match result {
        Ok(o) => (o.ok, o.detail),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let timing = match limit {
        Some(l) => {
            if elapsed > l {
                ok = false;
                detail.push_str(" [over time limit]");
            }
            format!("{:.3}s (limit {}s)", elapsed.as_secs_f64(), l.as_secs())
        }
        None => format!("{:.3}s", elapsed.as_secs_f64()),
    };
    println!("{} {name}: {detail}; {timing}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

// ---------------------------------------------------------------- routing

fn routing_table() -> Outcome {
    let registry = ToolRegistry::from_manifests(reference_manifests()).unwrap();
    let both: BTreeSet<_> = [Modality::Mri, Modality::Pet].into();
    let mri: BTreeSet<_> = [Modality::Mri].into();
    let pet: BTreeSet<_> = [Modality::Pet].into();
    let expected: [(TaskKind, &BTreeSet<Modality>, Option<&str>); 6] = [
        (TaskKind::Diagnosis, &both, Some("mm-diag")),
        (TaskKind::Prognosis, &both, Some("mm-prog")),
        (TaskKind::Diagnosis, &mri, Some("mri-diag")),
        (TaskKind::Diagnosis, &pet, Some("pet-diag")),
        (TaskKind::Prognosis, &mri, None),
        (TaskKind::Prognosis, &pet, None),
    ];
    let mut hits = 0;
    let mut misses = Vec::new();
    for (task, avail, want) in expected {
        let got = registry.resolve_tools(task, avail);
        let ok = match (&got, want) {
            (Ok(ids), Some(w)) => ids.first().map(String::as_str) == Some(w),
            (Err(RegistryError::NoApplicableTool { .. }), None) => true,
            _ => false,
        };
        if ok {
            hits += 1;
        } else {
            misses.push(format!("{task}/{avail:?} -> {got:?}"));
        }
    }
    check(hits == 6, format!("{hits}/6 exact {misses:?}"))
}

// ----------------------------------------------------------- coordinator

fn oracle_argmax(v: &[f64]) -> usize {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&x| x >= max - EPS).unwrap()
}

fn oracle_mean(ds: &[Vec<f64>]) -> Vec<f64> {
    let n = ds[0].len();
    (0..n).map(|c| ds.iter().map(|d| d[c]).sum::<f64>() / ds.len() as f64).collect()
}

fn oracle_vote(ds: &[Vec<f64>]) -> usize {
    let n = ds[0].len();
    let mut votes = vec![0usize; n];
    for d in ds {
        votes[oracle_argmax(d)] += 1;
    }
    let mean = oracle_mean(ds);
    let top = *votes.iter().max().unwrap();
    let tied: Vec<usize> = (0..n).filter(|&c| votes[c] == top).collect();
    let best = tied.iter().map(|&c| mean[c]).fold(f64::NEG_INFINITY, f64::max);
    *tied.iter().find(|&&c| mean[c] >= best - EPS).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    match rng.random_range(0..4) {
        // Coarse grid: ties are frequent.
        0 => {
            let mut units = vec![0u32; n];
            for _ in 0..10 {
                units[rng.random_range(0..n)] += 1;
            }
            units.iter().map(|&u| u as f64 / 10.0).collect()
        }
        1 => {
            let mut v = vec![0.0; n];
            v[rng.random_range(0..n)] = 1.0;
            v
        }
        _ => {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let mut v: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let rest: f64 = v[1..].iter().sum();
            v[0] = (1.0 - rest).max(0.0);
            v
        }
    }
}

fn coordinator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    for case in 0..1000 {
        let task = if rng.random_bool(0.5) { TaskKind::Diagnosis } else { TaskKind::Prognosis };
        let n = task.label_space().len();
        let k = rng.random_range(3..=7);
        let mut outcomes = Vec::new();
        let mut ok_dists = Vec::new();
        for m in 0..k {
            if m > 0 && rng.random_bool(0.15) {
                outcomes.push(ModelOutcome::failed(format!("m{m}"), "timeout after 10 ms", 10));
                continue;
            }
            let p = random_distribution(&mut rng, n);
            outcomes.push(ModelOutcome::ok(format!("m{m}"), ClassDistribution::new(task, p.clone()).unwrap(), 0));
            ok_dists.push(p);
        }
        let avg = coordinate_average(&outcomes).unwrap().label_index();
        let vote = coordinate_vote(&outcomes).unwrap().label_index();
        let (want_avg, want_vote) = (oracle_argmax(&oracle_mean(&ok_dists)), oracle_vote(&ok_dists));
        if avg != want_avg || vote != want_vote {
            mismatches.push(format!("case {case}: avg {avg}/{want_avg} vote {vote}/{want_vote}"));
        }
    }
    check(
        mismatches.is_empty(),
        format!("1000 sets, {} mismatches {:?}", mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>()),
    )
}

// --------------------------------------------------------------- metrics

fn oracle_metrics(preds: &[usize], labels: &[usize], n: usize) -> [f64; 4] {
    let mut cm = vec![vec![0.0f64; n]; n];
    for (&p, &t) in preds.iter().zip(labels) {
        cm[t][p] += 1.0;
    }
    let total = preds.len() as f64;
    let acc = (0..n).map(|c| cm[c][c]).sum::<f64>() / total;
    let (mut sen, mut spe, mut f1) = (vec![], vec![], vec![]);
    for c in 0..n {
        let tp = cm[c][c];
        let fn_: f64 = (0..n).filter(|&p| p != c).map(|p| cm[c][p]).sum();
        let fp: f64 = (0..n).filter(|&t| t != c).map(|t| cm[t][c]).sum();
        let tn = total - tp - fn_ - fp;
        if tp + fn_ + fp == 0.0 {
            continue;
        }
        if tp + fn_ > 0.0 {
            sen.push(tp / (tp + fn_));
        }
        if tn + fp > 0.0 {
            spe.push(tn / (tn + fp));
        }
        let denom = 2.0 * tp + fp + fn_;
        f1.push(if denom > 0.0 { 2.0 * tp / denom } else { 0.0 });
    }
    let avg = |v: &[f64], e: f64| if v.is_empty() { e } else { v.iter().sum::<f64>() / v.len() as f64 };
    [acc, avg(&spe, 1.0), avg(&sen, 0.0), avg(&f1, 0.0)]
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=3);
        let len = rng.random_range(1..=300);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(0..n) })
            .collect();
        let got = compute_metrics(&preds, &labels, n).unwrap().as_array();
        let want = oracle_metrics(&preds, &labels, n);
        for k in 0..4 {
            worst = worst.max((got[k] - want[k]).abs());
        }
    }
    let m = compute_metrics(&[0, 1, 1, 1], &[0, 1, 2, 1], 3).unwrap();
    let hand = format!("{:.4}/{:.4}/{:.4}/{:.4}", m.acc, m.sen, m.spe, m.f1);
    let hand_ok = hand == "0.7500/0.6667/0.8333/0.6000"
        && m.acc == 0.75
        && (m.sen - 2.0 / 3.0).abs() <= METRIC_TOL
        && (m.spe - 5.0 / 6.0).abs() <= METRIC_TOL
        && (m.f1 - 0.6).abs() <= METRIC_TOL;
    check(
        worst <= METRIC_TOL && hand_ok,
        format!("500 instances, max |diff| {worst:.1e} (tol 1e-12); hand example ACC/SEN/SPE/F1 = {hand}"),
    )
}

// -------------------------------------------------------------- ablation

fn is_cell(s: &str) -> bool {
    let Some((m, d)) = s.split_once('±') else { return false };
    let ok = |x: &str| {
        x.len() == 5 && x.as_bytes()[1] == b'.' && x.chars().filter(|c| c.is_ascii_digit()).count() == 4
    };
    ok(m) && ok(d)
}

fn desk_ablation() -> Outcome {
    let rt = runtime();
    let cfg = SynthConfig::independent(5, TaskKind::Diagnosis, 0.6, 1.0, 5000);
    let llm = RuleChat::from_tag("echo-vote").unwrap();
    let llm_strategy = CoordinationStrategy::LlmCoordinated {
        fallback: FallbackStrategy::Average,
    };
    let strategies = [CoordinationStrategy::Average, CoordinationStrategy::Vote, llm_strategy];
    let mut wins = 0;
    let mut echo_equal = 0;
    let mut formats_ok = true;
    let mut model_accs = Vec::new();
    let mut first: Option<RepeatedTable> = None;
    for group in 0..10u64 {
        let table = rt
            .block_on(run_repeated(&cfg, &strategies, 3, group * 1000, Some(&llm as &dyn ChatBackend), Execution::default()))
            .unwrap();
        let avg = table.row(&RowKind::Strategy(CoordinationStrategy::Average)).unwrap();
        let vote = table.row(&RowKind::Strategy(CoordinationStrategy::Vote)).unwrap();
        let echo = table.row(&RowKind::Strategy(llm_strategy)).unwrap();
        let best = table
            .rows
            .iter()
            .filter(|r| matches!(r.kind, RowKind::Model(_)))
            .map(|r| r.mean.acc)
            .fold(f64::NEG_INFINITY, f64::max);
        model_accs.extend(
            table.rows.iter().filter(|r| matches!(r.kind, RowKind::Model(_))).map(|r| r.mean.acc),
        );
        if avg.mean.acc > best {
            wins += 1;
        }
        if echo.runs == vote.runs {
            echo_equal += 1;
        }
        formats_ok &= table.rows.iter().all(|r| r.cells().iter().all(|c| is_cell(c)));
        first.get_or_insert(table);
    }
    let mean_model_acc = model_accs.iter().sum::<f64>() / model_accs.len() as f64;
    let table = first.unwrap();
    for line in table.render_text().lines() {
        println!("    {line}");
    }
    check(
        wins >= 9 && echo_equal == 10 && formats_ok && (mean_model_acc - 0.6).abs() < 0.02,
        format!(
            "Average > best single model in {wins}/10 groups (need >= 9); echo-vote == Vote in {echo_equal}/10; \
             m±s format {}; mean single-model ACC {mean_model_acc:.3}",
            if formats_ok { "ok" } else { "BROKEN" }
        ),
    )
}

// ------------------------------------------------------------ end to end

fn scan(modality: Modality, endianness: Endianness) -> dxagent_core::ScanRef {
    let bytes = common::nifti_bytes([64, 64, 64], endianness);
    let header = nifti::parse_file_bytes(&bytes).unwrap();
    nifti::validate_scan(&header, modality, format!("{}-fixture", modality.tag()), format!("fixture://{}", modality.tag()))
        .unwrap()
}

fn one_episode(rt: &tokio::runtime::Runtime) -> (Vec<String>, Vec<Stage>, Option<String>) {
    let registry = Arc::new(ToolRegistry::from_manifests(reference_manifests()).unwrap());
    let llm: Arc<dyn ChatBackend> = Arc::new(ScriptedChat::new(["FINAL: MCI\nREASON: four of five models favour MCI"]));
    let engine = Engine::new(registry, ToolInvoker::default()).with_llm(Some(llm));
    let mut state = SessionState::new("e2e");
    state.put_scan(scan(Modality::Mri, Endianness::Little));
    state.put_scan(scan(Modality::Pet, Endianness::Big));
    let query = Query::new("e2e", "What is the current stage of this patient?", vec![]).unwrap();
    let response = rt.block_on(engine.run_episode(
        query,
        &mut state,
        CoordinationStrategy::default(),
        &mut dxagent_core::engine::NoopSink,
    ));
    let payloads = state.trace().iter().map(|e| serde_json::to_string(&e.payload).unwrap()).collect();
    let stages = state.trace().iter().map(|e| e.stage).collect();
    (payloads, stages, response.decision.map(|d| d.label_name().to_string()))
}

fn e2e_episode() -> Outcome {
    let rt = runtime();
    let (a, stages, label) = one_episode(&rt);
    let (b, _, _) = one_episode(&rt);
    let four = stages == [Stage::Observation, Stage::Thought, Stage::Action, Stage::Coordination];
    let in_space = label.as_deref().is_some_and(|l| ["CN", "MCI", "AD"].contains(&l));
    check(
        four && in_space && a == b,
        format!(
            "stages {stages:?}; decision {label:?}; payloads byte-identical across runs: {}",
            a == b
        ),
    )
}

// -------------------------------------------------------- LLM robustness

fn llm_robustness() -> Outcome {
    let rt = runtime();
    let outcomes: Vec<ModelOutcome> = [[0.2, 0.5, 0.3], [0.1, 0.3, 0.6], [0.3, 0.4, 0.3]]
        .iter()
        .enumerate()
        .map(|(i, p)| ModelOutcome::ok(format!("m{i}"), ClassDistribution::new(TaskKind::Diagnosis, p.to_vec()).unwrap(), 0))
        .collect();
    let bad = ScriptedChat::new(["no idea", "FINAL: maybe", "the answer is AD"]);
    let d = rt
        .block_on(coordinate_llm(&outcomes, Some(&bad), FallbackStrategy::Average))
        .unwrap();
    let calls = bad.calls().len();
    let avg = coordinate_average(&outcomes).unwrap();
    let fell_back = d.strategy == CoordinationStrategy::Average && d.label_index() == avg.label_index();

    let lower = ScriptedChat::new(["final: ad"]);
    let d2 = rt
        .block_on(coordinate_llm(&outcomes, Some(&lower), FallbackStrategy::Average))
        .unwrap();
    check(
        calls == 3 && fell_back && d2.label_name() == "AD",
        format!(
            "malformed x3 -> {calls} calls (1 + 2 retries), fallback {} label {}; \"final: ad\" -> {}",
            d.strategy,
            d.label_name(),
            d2.label_name()
        ),
    )
}

// ------------------------------------------------------------------ NIfTI

fn header_invariants(h: &NiftiHeader) -> bool {
    let nd = h.dim[0];
    h.sizeof_hdr == HEADER_SIZE as i32
        && (h.magic == nifti::MAGIC_SINGLE || h.magic == nifti::MAGIC_PAIR)
        && (1..=7).contains(&nd)
        && h.dim[1..=nd as usize].iter().all(|&d| d >= 1)
}

fn byte_swap_u32(v: u32) -> u32 {
    (v << 24) | ((v << 8) & 0x00ff_0000) | ((v >> 8) & 0x0000_ff00) | (v >> 24)
}

fn nifti_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(348);
    let mut round_trips = 0;
    for i in 0..2000 {
        let e = if i % 2 == 0 { Endianness::Little } else { Endianness::Big };
        let nd = rng.random_range(1..=7i16);
        let mut dim = [1i16; 8];
        dim[0] = nd;
        for d in dim.iter_mut().skip(1).take(nd as usize) {
            *d = rng.random_range(1..=i16::MAX);
        }
        let h = NiftiHeader::new(dim, rng.random(), rng.random(), e);
        let parsed = nifti::parse_header(&h.to_bytes()).unwrap();
        if parsed == h && parsed.to_bytes() == h.to_bytes() {
            round_trips += 1;
        }
    }

    let base = NiftiHeader::new([3, 64, 64, 64, 1, 1, 1, 1], 16, 32, Endianness::Little).to_bytes();
    let ex1 = nifti::parse_header(&base).is_ok_and(|h| h.endianness == Endianness::Little && h.dim[0] == 3);
    let mut bad = base;
    bad[344..348].copy_from_slice(b"xyz\0");
    let ex2 = matches!(nifti::parse_header(&bad), Err(NiftiError::BadMagic(_)));
    let big = NiftiHeader::new([3, 64, 64, 64, 1, 1, 1, 1], 16, 32, Endianness::Big).to_bytes();
    let native = u32::from_ne_bytes(big[0..4].try_into().unwrap());
    let swapped_348 = native == byte_swap_u32(348) && native == 1_543_569_408;
    let ex3 = swapped_348 && nifti::parse_header(&big).is_ok_and(|h| h.endianness == Endianness::Big);

    let mut violations = 0;
    let mut accepted = 0;
    for i in 0..10_000 {
        let mut buf = [0u8; HEADER_SIZE];
        rng.fill(&mut buf[..]);
        // Half the buffers get a valid size and magic so the dim checks run.
        if i % 2 == 0 {
            let (size, magic) = if rng.random_bool(0.5) {
                (348i32.to_le_bytes(), nifti::MAGIC_SINGLE)
            } else {
                (348i32.to_be_bytes(), nifti::MAGIC_PAIR)
            };
            buf[0..4].copy_from_slice(&size);
            buf[344..348].copy_from_slice(&magic);
            if i % 4 == 0 {
                let nd = rng.random_range(0..=8u8);
                let e = if size == 348i32.to_le_bytes() { [nd, 0] } else { [0, nd] };
                buf[40..42].copy_from_slice(&e);
            }
        }
        match nifti::parse_header(&buf) {
            Ok(h) => {
                accepted += 1;
                if !header_invariants(&h) {
                    violations += 1;
                }
            }
            Err(_) => {}
        }
    }
    check(
        round_trips == 2000 && ex1 && ex2 && ex3 && violations == 0,
        format!(
            "round-trip {round_trips}/2000 (both byte orders); examples little/BadMagic/swapped-348: {ex1}/{ex2}/{ex3}; \
             10000 random buffers: {accepted} accepted, {violations} invariant violations"
        ),
    )
}

// ---------------------------------------------------------- crash/restart

fn start_server(dir: &std::path::Path) -> (std::process::Child, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dxagent"))
        .args(["serve", "--listen", "127.0.0.1:0", "--data-dir"])
        .arg(dir)
        .env_remove("DXAGENT_LLM_URL")
        .env_remove("DXAGENT_LLM_MODEL")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").unwrap().to_string();
    (child, base)
}

fn crash_restart() -> Outcome {
    let rt = runtime();
    let dir = tempfile::tempdir().unwrap();
    let (mut child, base) = start_server(dir.path());
    let (session, before) = rt.block_on(async {
        let c = common::Client::new(base);
        let s = c.create_session(None).await;
        c.upload(&s, "mri", common::nifti_bytes([32, 32, 32], Endianness::Little)).await;
        c.upload(&s, "pet", common::nifti_bytes([32, 32, 32], Endianness::Little)).await;
        c.query(&s, "diagnosis please").await;
        c.query(&s, "will this MCI patient convert?").await;
        let t = c.trace(&s, 0).await;
        (s, t)
    });
    child.kill().unwrap();
    child.wait().unwrap();
    let log = dir.path().join("sessions").join(&session).join("events.jsonl");
    std::fs::OpenOptions::new()
        .append(true)
        .open(&log)
        .unwrap()
        .write_all(br#"{"record":"trace","event":{"seq":8,"#)
        .unwrap();

    let (mut child, base) = start_server(dir.path());
    let after = rt.block_on(common::Client::new(base).trace(&session, 0));
    child.kill().unwrap();
    child.wait().unwrap();
    check(
        !before.is_empty() && before == after,
        format!("{} events before SIGKILL (+ torn tail line), {} replayed, identical: {}", before.len(), after.len(), before == after),
    )
}

fn main() {
    let results = [
        report("routing-table", Some(Duration::from_secs(1)), routing_table),
        report("coordinator-oracle", Some(Duration::from_secs(5)), coordinator_oracle),
        report("metrics-oracle", None, metrics_oracle),
        report("desk-scale-ablation", Some(Duration::from_secs(60)), desk_ablation),
        report("e2e-deterministic-episode", None, e2e_episode),
        report("llm-robustness", None, llm_robustness),
        report("nifti-suite", None, nifti_suite),
        report("crash-restart", None, crash_restart),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
