//! Acceptance suite: one line per criterion, nonzero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dfmr::analyzer::{analyze_corpus, AnalyzeOptions};
use dfmr::bench::{ladder_cases, run_bench, superlinear_pairs};
use dfmr::budget::max_images;
use dfmr::corpus::{scan_corpus, synth_corpus};
use dfmr::npy::{read_map, write_map};
use dfmr::synth::{synth_map, SynthKind};
use dfmr::{
    average_pool, compress, mean_sigma, select_factor, ChannelAggregation, CompressionPolicy, Error, FeatureMap,
    StopReason, WindowMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

const MODES: [WindowMode; 2] = [WindowMode::PaperLiteral, WindowMode::PoolWindow];
const AGGREGATIONS: [ChannelAggregation; 2] = [ChannelAggregation::PooledScalars, ChannelAggregation::PerChannelMean];

fn fixed_token_counts() -> Outcome {
    let map = synth_map(SynthKind::WhiteNoise, 24, 24, 8, 7, 1.0).unwrap();
    let mut counts = Vec::new();
    for s in [1, 2, 3] {
        let (pooled, d) = compress(&map, &CompressionPolicy::fixed(s).unwrap()).map_err(|e| e.to_string())?;
        ensure!(
            pooled.tokens() == d.tokens_out,
            "s={s}: tokens_out {} != grid {}",
            d.tokens_out,
            pooled.tokens()
        );
        ensure!(pooled.channels() == 8, "s={s}: channels changed");
        counts.push(pooled.tokens());
    }
    ensure!(counts == [576, 144, 64], "token counts {counts:?}");
    Ok(format!("tokens {counts:?}"))
}

fn pooling_matches_oracle() -> Outcome {
    let maps = common::random_maps(200, &[4, 6, 12, 24], &[1, 3, 8], 11);
    let mut compared = 0usize;
    let mut worst = 0.0f64;
    for (i, map) in maps.iter().enumerate() {
        let (h, w, d) = (map.height(), map.width(), map.channels());
        let same = average_pool(map, 1).unwrap();
        ensure!(
            same.values()
                .iter()
                .zip(map.values())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "map {i}: s=1 is not bit-exact"
        );
        for s in common::valid_factors(h, w) {
            let got = average_pool(map, s).unwrap();
            let want = common::pool(map.values(), h, w, d, s);
            ensure!(got.values().len() == want.len(), "map {i} s={s}: length");
            for (k, (&a, &b)) in got.values().iter().zip(&want).enumerate() {
                ensure!(common::close(a as f64, b, 1e-6), "map {i} s={s} value {k}: {a} vs {b}");
                worst = worst.max((a as f64 - b).abs() / b.abs().max(1e-12));
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} values, max rel err {worst:.2e}"))
}

fn metric_matches_oracle() -> Outcome {
    let maps = common::random_maps(200, &[4, 6, 12, 24], &[1, 3, 8], 13);
    let mut compared = 0usize;
    let mut worst = 0.0f64;
    for (i, map) in maps.iter().enumerate() {
        let (h, w, d) = (map.height(), map.width(), map.channels());
        for s in common::valid_factors(h, w) {
            for mode in MODES {
                for agg in AGGREGATIONS {
                    let literal = mode == WindowMode::PaperLiteral;
                    let per_channel = agg == ChannelAggregation::PerChannelMean;
                    let report = mean_sigma(map, s, mode, agg).unwrap();
                    let want = common::window_sigmas(map.values(), h, w, d, s, literal, per_channel);
                    ensure!(
                        report.window_sigmas.len() == want.len(),
                        "map {i} s={s} {mode} {agg}: window count"
                    );
                    for (a, b) in report.window_sigmas.iter().zip(&want) {
                        ensure!(common::close(*a, *b, 1e-6), "map {i} s={s} {mode} {agg}: {a} vs {b}");
                    }
                    let m = common::mean_sigma(map.values(), h, w, d, s, literal, per_channel);
                    ensure!(
                        common::close(report.mean_sigma, m, 1e-6),
                        "map {i} s={s} {mode} {agg}: mean {} vs {m}",
                        report.mean_sigma
                    );
                    worst = worst.max((report.mean_sigma - m).abs() / m.abs().max(1e-12));
                    compared += 1;
                }
            }
        }
    }
    Ok(format!(
        "{compared} (map, s, mode, aggregation) cases, max rel err {worst:.2e}"
    ))
}

fn closed_form_values() -> Outcome {
    for (i, c) in [0.0f32, 1.0, -3.5, 1e3].into_iter().enumerate() {
        for (h, d) in [(24, 4), (12, 1), (6, 8)] {
            let map = FeatureMap::new(h, h, d, vec![c; h * h * d]).unwrap();
            for mode in MODES {
                for agg in AGGREGATIONS {
                    for s in [1, 2, 3] {
                        let sigma = mean_sigma(&map, s, mode, agg).unwrap().mean_sigma;
                        ensure!(sigma == 0.0, "constant {c} s={s} {mode} {agg}: sigma {sigma}");
                    }
                    let policy = CompressionPolicy::dynamic(0.05, vec![1, 2, 3], mode, agg).unwrap();
                    let dec = select_factor(&map, &policy).unwrap();
                    ensure!(
                        dec.chosen_factor == 3 && dec.stop_reason == StopReason::ReachedMax,
                        "constant case {i}: chose {} ({:?})",
                        dec.chosen_factor,
                        dec.stop_reason
                    );
                }
            }
        }
    }
    let ramp = FeatureMap::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
    let s1 = mean_sigma(&ramp, 1, WindowMode::PaperLiteral, ChannelAggregation::PooledScalars)
        .unwrap()
        .mean_sigma;
    let s2 = mean_sigma(&ramp, 2, WindowMode::PaperLiteral, ChannelAggregation::PooledScalars)
        .unwrap()
        .mean_sigma;
    let (e1, e2) = ((255.0f64 / 12.0).sqrt(), 4.25f64.sqrt());
    ensure!((s1 - e1).abs() <= 1e-9, "ramp s=1: {s1} vs {e1}");
    ensure!((s2 - e2).abs() <= 1e-9, "ramp s=2: {s2} vs {e2}");
    Ok(format!("ramp sigma(1)={s1:.12}, sigma(2)={s2:.12}"))
}

fn random_trial_map(rng: &mut ChaCha8Rng) -> FeatureMap {
    let side = [6, 12, 24][rng.gen_range(0..3)];
    let d = [1, 3, 8][rng.gen_range(0..3)];
    let kind = [SynthKind::WhiteNoise, SynthKind::Gradient, SynthKind::Checkerboard][rng.gen_range(0..3)];
    let amplitude = rng.gen_range(0.0f32..0.4);
    synth_map(kind, side, side, d, rng.gen(), amplitude).unwrap()
}

fn threshold_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut distinct = 0;
    for trial in 0..1000 {
        let map = random_trial_map(&mut rng);
        let mode = MODES[rng.gen_range(0..2)];
        let agg = AGGREGATIONS[rng.gen_range(0..2)];
        let (a, b): (f64, f64) = (rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25));
        let (lo, hi) = (a.min(b), a.max(b));
        let pick = |t| {
            let p = CompressionPolicy::dynamic(t, vec![1, 2, 3], mode, agg).unwrap();
            select_factor(&map, &p).unwrap().chosen_factor
        };
        let (s_lo, s_hi) = (pick(lo), pick(hi));
        ensure!(
            s_lo <= s_hi,
            "trial {trial}: tau {lo} -> s={s_lo}, tau {hi} -> s={s_hi}"
        );
        distinct += usize::from(s_lo != s_hi);
    }
    Ok(format!("1000 trials, {distinct} with differing factors"))
}

fn check_pooled(label: &str, map: &FeatureMap, pooled: &FeatureMap, s: usize) -> Result<(), String> {
    let (h, w, d) = (map.height(), map.width(), map.channels());
    ensure!(
        pooled.shape() == [h / s, w / s, d],
        "{label}: shape {:?}",
        pooled.shape()
    );
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let (mean_in, mean_out) = (mean(map.values()), mean(pooled.values()));
    ensure!(
        common::close(mean_out, mean_in, 1e-6),
        "{label}: global mean {mean_in} became {mean_out}"
    );
    let (lo, hi) = map
        .values()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    for ch in 0..d {
        for i in 0..h / s {
            for j in 0..w / s {
                let (block_lo, block_hi) = (0..s)
                    .flat_map(|u| (0..s).map(move |v| (u, v)))
                    .map(|(u, v)| map.get(i * s + u, j * s + v, ch))
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                let out = pooled.get(i, j, ch);
                ensure!(
                    block_lo <= out && out <= block_hi && lo <= out && out <= hi,
                    "{label}: pooled {out} outside block range [{block_lo}, {block_hi}]"
                );
            }
        }
    }
    Ok(())
}

fn conservation_and_range() -> Outcome {
    let corpus = common::random_maps(200, &[4, 6, 12, 24], &[1, 3, 8], 11);
    let mut checked = 0;
    for (i, map) in corpus.iter().enumerate() {
        for s in common::valid_factors(map.height(), map.width()) {
            check_pooled(&format!("map {i} s={s}"), map, &average_pool(map, s).unwrap(), s)?;
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for trial in 0..500 {
        let map = random_trial_map(&mut rng);
        let policy = match trial % 3 {
            0 => CompressionPolicy::fixed([1, 2, 3][rng.gen_range(0..3)]).unwrap(),
            1 => CompressionPolicy::random(vec![1, 2, 3], rng.gen()).unwrap(),
            _ => CompressionPolicy::dynamic(
                rng.gen_range(0.0..0.25),
                vec![1, 2, 3],
                MODES[trial % 2],
                AGGREGATIONS[0],
            )
            .unwrap(),
        };
        let (pooled, dec) = compress(&map, &policy).unwrap();
        let s = dec.chosen_factor;
        ensure!(dec.tokens_out == pooled.tokens(), "trial {trial}: tokens_out");
        check_pooled(&format!("trial {trial}"), &map, &pooled, s)?;
        checked += 1;
    }
    Ok(format!(
        "{checked} pooled maps (random corpus at every factor, plus fixed/random/dynamic policies)"
    ))
}

fn synthetic_corpus_split() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    synth_corpus(SynthKind::Constant, [24, 24, 4], 100, 1, 0.5, &dir.path().join("flat")).map_err(|e| e.to_string())?;
    synth_corpus(
        SynthKind::WhiteNoise,
        [24, 24, 4],
        100,
        2,
        1.0,
        &dir.path().join("noise"),
    )
    .map_err(|e| e.to_string())?;
    let manifest = scan_corpus(dir.path()).map_err(|e| e.to_string())?;
    ensure!(
        manifest.len() == 200 && manifest.diagnostics.is_empty(),
        "scanned {} maps",
        manifest.len()
    );
    let opts = AnalyzeOptions {
        thresholds: vec![0.05],
        ..Default::default()
    };
    let report = analyze_corpus(dir.path(), &manifest, &opts).map_err(|e| e.to_string())?;
    let summary = &report.ratio_summary[0];
    let share = |f: usize| {
        summary
            .shares
            .iter()
            .find(|s| s.factor == f)
            .map_or(0.0, |s| s.fraction)
    };
    ensure!(
        share(3) == 0.5 && share(1) == 0.5,
        "shares s=1 {} s=3 {}",
        share(1),
        share(3)
    );
    ensure!(
        report.rankings.top.len() == 10 && report.rankings.bottom.len() == 10,
        "ranking sizes"
    );
    ensure!(
        report.rankings.top.iter().all(|m| m.id.starts_with("noise/")),
        "top-10 contains a constant map"
    );
    ensure!(
        report.rankings.bottom.iter().all(|m| m.id.starts_with("flat/")),
        "bottom-10 contains a noise map"
    );
    Ok(format!(
        "s=1 {:.0}%, s=3 {:.0}%, mean tokens {}",
        share(1) * 100.0,
        share(3) * 100.0,
        summary.mean_tokens
    ))
}

fn image_capacity() -> Outcome {
    let caps: Vec<usize> = [1, 2, 3]
        .iter()
        .map(|&s| max_images((24, 24), s, 512, 4096).unwrap())
        .collect();
    ensure!(caps == [6, 24, 56], "capacities {caps:?}");
    Ok(format!("max images {caps:?}"))
}

fn raw_npy(dict: &str, version: [u8; 2], payload: &[u8]) -> Vec<u8> {
    let mut out = b"\x93NUMPY".to_vec();
    out.extend_from_slice(&version);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend_from_slice(payload);
    out
}

fn io_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let maps = common::random_maps(50, &[4, 6, 12, 24], &[1, 3, 8], 23);
    for (i, map) in maps.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.npy"));
        write_map(map, &path).map_err(|e| e.to_string())?;
        let back = read_map(&path).map_err(|e| e.to_string())?;
        ensure!(back.shape() == map.shape(), "map {i}: shape");
        ensure!(
            back.values()
                .iter()
                .zip(map.values())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "map {i}: values differ"
        );
    }

    let good = "{'descr': '<f4', 'fortran_order': False, 'shape': (1, 1, 1), }\n";
    let four = [0u8; 4];
    let cases: Vec<(&str, Vec<u8>, fn(&Error) -> bool)> = vec![
        ("bad magic", b"NOTNPY\x01\x00\x00\x00".to_vec(), |e| {
            matches!(e, Error::BadMagic)
        }),
        ("version 9", raw_npy(good, [9, 0], &four), |e| {
            matches!(e, Error::UnsupportedVersion { .. })
        }),
        ("dtype <i4", raw_npy(&good.replace("<f4", "<i4"), [1, 0], &four), |e| {
            matches!(e, Error::UnsupportedDtype(_))
        }),
        ("fortran", raw_npy(&good.replace("False", "True"), [1, 0], &four), |e| {
            matches!(e, Error::FortranOrder)
        }),
        (
            "rank 4",
            raw_npy(&good.replace("(1, 1, 1)", "(1, 1, 1, 1)"), [1, 0], &four),
            |e| matches!(e, Error::ShapeRank(_)),
        ),
        (
            "garbled dict",
            raw_npy("{'descr': '<f4', 'shape' (1,)}\n", [1, 0], &four),
            |e| matches!(e, Error::BadHeader(_)),
        ),
        ("short payload", raw_npy(good, [1, 0], &[0u8; 2]), |e| {
            matches!(e, Error::Truncated { .. })
        }),
        ("short header", b"\x93NUMPY\x01\x00\x40\x00{'descr'".to_vec(), |e| {
            matches!(e, Error::Truncated { .. } | Error::BadHeader(_))
        }),
    ];
    for (name, bytes, expected) in &cases {
        let path = dir.path().join("bad.npy");
        std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
        match read_map(&path) {
            Ok(_) => return Err(format!("{name}: accepted")),
            Err(e) => ensure!(expected(&e), "{name}: unexpected error {e}"),
        }
    }

    let names: Vec<String> = (0..12).map(|i| format!("d{}/m{i:02}.npy", i % 3)).collect();
    let write_all = |root: &Path, order: &[usize]| {
        for &i in order {
            let path = root.join(&names[i]);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            write_map(&maps[i], &path).unwrap();
        }
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_all(&a, &(0..12).collect::<Vec<_>>());
    write_all(&b, &(0..12).rev().collect::<Vec<_>>());
    let (ma, mb) = (
        scan_corpus(&a).map_err(|e| e.to_string())?,
        scan_corpus(&b).map_err(|e| e.to_string())?,
    );
    ensure!(
        ma.to_json().unwrap() == mb.to_json().unwrap(),
        "manifests depend on write order"
    );
    Ok(format!(
        "50 round trips bit-exact, {} malformed files rejected, scan order independent",
        cases.len()
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dfmr"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "dfmr {}: {:?}\n{}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn dir_contents(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(root)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    for (kind, count, seed) in [
        ("white-noise", "20", "3"),
        ("constant", "10", "0"),
        ("gradient", "6", "0"),
    ] {
        run_cli(&[
            "synth",
            "--kind",
            kind,
            "--dims",
            "12x12x3",
            "--count",
            count,
            "--seed",
            seed,
            "--amplitude",
            "0.1",
            "--output",
            &p(&format!("corpus/{kind}")),
        ])?;
    }
    let corpus = p("corpus");
    let jobs: [(&str, &[&str]); 3] = [
        ("compress", &[]),
        // random draws depend on (seed, map index) only, never on scheduling
        ("compress", &["--policy", "random", "--seed", "5"]),
        ("analyze", &[]),
    ];
    let mut files = 0;
    for (j, (cmd, flags)) in jobs.iter().enumerate() {
        let mut runs = Vec::new();
        for tag in ["a", "b", "seq"] {
            let out = p(&format!("{cmd}_{j}_{tag}"));
            let mut args = vec![*cmd, "--input", &corpus, "--output", &out, "--no-timestamp"];
            args.extend(flags.iter());
            if tag == "seq" {
                args.push("--sequential");
            }
            run_cli(&args)?;
            runs.push(dir_contents(Path::new(&out)));
        }
        ensure!(!runs[0].is_empty(), "{cmd} {flags:?}: no output files");
        ensure!(runs[1] == runs[0], "{cmd} {flags:?}: rerun differs");
        ensure!(runs[2] == runs[0], "{cmd} {flags:?}: --sequential differs");
        files += runs[0].len();
    }
    Ok(format!(
        "compress (dynamic, random) and analyze byte-identical across reruns and --sequential ({files} files per run)"
    ))
}

fn bench_scaling() -> Outcome {
    let results = run_bench(
        &ladder_cases(&CompressionPolicy::default_dynamic(), SynthKind::Constant),
        25,
        5,
        0,
    )
    .map_err(|e| e.to_string())?;
    let bad = superlinear_pairs(&results, 3.0);
    let describe = |i: usize| {
        let c = &results[i].case;
        format!("{}x{}x{}", c.height, c.width, c.channels)
    };
    ensure!(
        bad.is_empty(),
        "superlinear growth: {}",
        bad.iter()
            .map(|(a, b, x)| format!("{} -> {} ({x:.1}x linear)", describe(*a), describe(*b)))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let target = results
        .iter()
        .find(|r| (r.case.height, r.case.width, r.case.channels) == (24, 24, 1024))
        .ok_or("missing 24x24x1024 case")?;
    let median_ms = target.latency.median * 1e3;
    ensure!(median_ms < 10.0, "24x24x1024 median {median_ms:.3} ms");
    Ok(format!(
        "{} sizes within 3x of linear, 24x24x1024 median {median_ms:.3} ms",
        results.len()
    ))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "fixed factors give 576/144/64 tokens on a 24x24 grid",
            budget: Duration::from_secs(1),
            run: fixed_token_counts,
        },
        Criterion {
            name: "average pooling matches scalar oracle (1e-6 rel), s=1 bit-exact",
            budget: Duration::from_secs(10),
            run: pooling_matches_oracle,
        },
        Criterion {
            name: "window sigma matches two-pass oracle in both modes and aggregations (1e-6 rel)",
            budget: Duration::from_secs(10),
            run: metric_matches_oracle,
        },
        Criterion {
            name: "closed forms: constant maps give sigma 0 and reach max; 4x4 ramp (1e-9)",
            budget: Duration::from_secs(5),
            run: closed_form_values,
        },
        Criterion {
            name: "chosen factor is monotone in threshold over 1000 trials",
            budget: Duration::from_secs(30),
            run: threshold_monotonicity,
        },
        Criterion {
            name: "pooled global mean within 1e-6 rel of input; values within block range",
            budget: Duration::from_secs(60),
            run: conservation_and_range,
        },
        Criterion {
            name: "constant/noise corpus splits 50/50 at tau=0.05 with correct rankings",
            budget: Duration::from_secs(30),
            run: synthetic_corpus_split,
        },
        Criterion {
            name: "multi-image capacity 6/24/56 for s=1/2/3",
            budget: Duration::from_secs(5),
            run: image_capacity,
        },
        Criterion {
            name: "npy round trip, malformed headers, scan order independence",
            budget: Duration::from_secs(30),
            run: io_round_trip,
        },
        Criterion {
            name: "CLI outputs are deterministic across reruns and thread counts",
            budget: Duration::from_secs(120),
            run: cli_determinism,
        },
        Criterion {
            name: "latency scales within 3x of linear; 24x24x1024 under 10 ms",
            budget: Duration::from_secs(300),
            run: bench_scaling,
        },
    ];
    let mut failures = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; took {elapsed:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {} ({detail}; {elapsed:.2?})", i + 1, c.name),
            Err(why) => {
                failures += 1;
                println!("[FAIL] {:>2} {}: {why}", i + 1, c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
