//! One line per acceptance criterion, then a single assertion over all of them.
//! Set `M3HOP_BLESS=1` to regenerate the prompt golden files; run with `cargo test --test acceptance`.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use m3hop_core::cot::{build_prompt, rationalize_dataset, LlmEndpointConfig, MockTransport, PromptHop, RationaleCache, RationalizeOptions};
use m3hop_core::datamodel::{EorTriplet, Hop, Split};
use m3hop_core::evaluator::{compute_metrics, run_ablation, AblationData, Variant};
use m3hop_core::fusion::{cross_attend, init_params, mfb_fuse, FusionConfig, Stage, ValueSource};
use m3hop_core::numerics::{finite_diff_check, GradCheckOptions, Graph, Tensor};
use m3hop_core::objective::{cross_entropy_loss, scl_loss, SclBank};
use m3hop_core::synthetic::{planted, PlantedSpec};
use m3hop_core::trainer::{batch_objective, prepare_samples, save_checkpoint, train, write_history, Ablation, Sample, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let data = planted(&PlantedSpec { n_train: 2, n_dev: 0, ..PlantedSpec::default() }).unwrap();
    let provider = m3hop_core::encoder::FeatureProvider::toy(32, 32, 42);
    let refs: Vec<_> = data.records.iter().collect();
    let batch = prepare_samples(&refs, &data.rationales, &provider, Ablation::default().stages()).unwrap();
    let batch: Vec<&Sample> = batch.iter().collect();
    let train_cfg = TrainConfig::default();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut ok = true;
    for mode in [ValueSource::Rationale, ValueSource::Fused] {
        let fusion = FusionConfig { value_source: mode, ..FusionConfig::tiny() };
        let params = init_params(&fusion).unwrap();
        let report = finite_diff_check(
            |p| batch_objective(p, &batch, &fusion, &train_cfg).map(|(l, g)| (l.total, g)),
            &params,
            &GradCheckOptions { h: 1e-4, tol: 1e-4, ..GradCheckOptions::default() },
        )
        .unwrap();
        ok &= report.passed();
        worst = worst.max(report.max_relative_error());
        coords += report.paths.iter().map(|p| p.coordinates).sum::<usize>();
    }
    let elapsed = start.elapsed();
    check(
        ok && elapsed < Duration::from_secs(60),
        format!("{coords} coordinates, max rel err {worst:.2e} (tol 1e-4), {elapsed:.2?} (limit 60s)"),
    )
}

fn mfb_oracle() -> Outcome {
    let mut r = rng(1234);
    let mut worst: f64 = 0.0;
    for k in [1, 2, 5] {
        for _ in 0..100 {
            let cfg = FusionConfig {
                d_t: r.gen_range(2..10),
                d_v: r.gen_range(2..10),
                o: r.gen_range(2..8),
                k_mfb: k,
                seed: r.gen(),
                ..FusionConfig::tiny()
            };
            let params = init_params(&cfg).unwrap();
            let ft = rand_vec(&mut r, cfg.d_t);
            let fv = rand_vec(&mut r, cfg.d_v);
            let mut g = Graph::new();
            let a = g.constant(Tensor::row(ft.clone()).unwrap()).unwrap();
            let b = g.constant(Tensor::row(fv.clone()).unwrap()).unwrap();
            let m = mfb_fuse(&mut g, a, b, &params, &cfg).unwrap();
            let u = rows(params.get("mfb.U").unwrap());
            let v = rows(params.get("mfb.V").unwrap());
            worst = worst.max(max_abs_diff(g.value(m).data(), &mfb_bilinear_oracle(&ft, &fv, &u, &v, k)));
        }
    }
    check(worst < 1e-10, format!("300 instances, k in {{1,2,5}}, max abs diff {worst:.2e} (tol 1e-10)"))
}

fn attention_degenerate() -> Outcome {
    let mut r = rng(77);
    let mut single: f64 = 0.0;
    let mut fused: f64 = 0.0;
    let mut loop3: f64 = 0.0;
    for mode in [ValueSource::Rationale, ValueSource::Fused] {
        let cfg = FusionConfig { value_source: mode, ..FusionConfig::tiny() };
        let params = init_params(&cfg).unwrap();
        for stage in Stage::ALL {
            let s = stage.prefix();
            let w = |n: &str| rows(params.get(&format!("{s}.{n}")).unwrap());
            let gain = params.get(&format!("{s}.ln_gain")).unwrap().data().to_vec();
            let bias = params.get(&format!("{s}.ln_bias")).unwrap().data().to_vec();
            let query = rand_vec(&mut r, cfg.o);
            let run = |tokens: &Tensor| {
                let mut g = Graph::new();
                let q = g.constant(Tensor::row(query.clone()).unwrap()).unwrap();
                let t = g.constant(tokens.clone()).unwrap();
                let out = cross_attend(&mut g, q, t, &params, stage, &cfg).unwrap();
                g.value(out).data().to_vec()
            };
            let resid = |v: Vec<f64>| v.iter().zip(&query).map(|(a, b)| a + b).collect::<Vec<_>>();

            let one = rand_tensor(&mut r, 1, cfg.d_t);
            let source = if mode == ValueSource::Fused { query.clone() } else { one.data().to_vec() };
            let expect = layer_norm_loop(&resid(vec_mat(&source, &w("Wv"))), &gain, &bias, 1e-5);
            single = single.max(max_abs_diff(&run(&one), &expect));

            if mode == ValueSource::Fused {
                let expect = layer_norm_loop(&resid(vec_mat(&query, &w("Wv"))), &gain, &bias, 1e-5);
                for len in [2, 5] {
                    let tokens = rand_tensor(&mut r, len, cfg.d_t).map(|x| x * 50.0);
                    fused = fused.max(max_abs_diff(&run(&tokens), &expect));
                }
            }

            let three = rand_tensor(&mut r, 3, cfg.d_t);
            let oracle = attention_oracle(&query, &rows(&three), &w("Wq"), &w("Wk"), &w("Wv"), &gain, &bias, mode == ValueSource::Fused);
            loop3 = loop3.max(max_abs_diff(&run(&three), &oracle));
        }
    }
    check(
        single < 1e-10 && fused < 1e-10 && loop3 < 1e-10,
        format!("single-token {single:.2e}, fused-mode {fused:.2e}, L=3 loop {loop3:.2e} (tol 1e-10)"),
    )
}

fn scl_closed_form() -> Outcome {
    let m = [Tensor::row(vec![1.0, 0.0]).unwrap(), Tensor::row(vec![0.0, 1.0]).unwrap()];
    let got = scl_loss(&m, &m, 1.0, SclBank::Full).unwrap();
    let want = (1.0 + 2.0 * (-1.0f64).exp()).ln();
    check((got - want).abs() < 1e-9, format!("{got:.12} vs log(1+2/e) = {want:.12} (tol 1e-9)"))
}

fn ce_closed_forms() -> Outcome {
    let p = |x: f64| Tensor::row(vec![1.0 - x, x]).unwrap();
    let half = cross_entropy_loss(&[p(0.5)], &[1]).unwrap();
    let pair = cross_entropy_loss(&[p(0.8), p(0.4)], &[1, 0]).unwrap();
    let want = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
    check(
        (half - 2f64.ln()).abs() < 1e-12 && (pair - want).abs() < 1e-9,
        format!("ln2 case diff {:.1e} (tol 1e-12); two-sample {pair:.9} vs {want:.9} (tol 1e-9)", (half - 2f64.ln()).abs()),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let run = planted_via_mock(42);
    let (t, f, p) = toy_configs(42);
    let out = train(&run.records, &run.rationales, &p, &t, &f).unwrap();
    let first = out.history.iter().find(|h| h.train_macro_f1.unwrap_or(0.0) >= 0.99).map(|h| h.epoch);
    let n_train = run.records.iter().filter(|r| r.split == Split::Train).count();
    let elapsed = start.elapsed();
    check(
        first.is_some() && n_train == 64 && elapsed < Duration::from_secs(300),
        format!("{n_train} train memes, first epoch with train macro-F1 >= 0.99: {first:?} of {}, {elapsed:.2?} (limit 300s)", t.epochs),
    )
}

fn ablation_direction() -> Outcome {
    let run = planted_via_mock(42);
    let variants = [Variant::Full, Variant::OnlyEmotion, Variant::OnlyTarget, Variant::OnlyContext];
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in [42u64, 1, 2, 3, 4] {
        let (t, f, p) = toy_configs(seed);
        let data = AblationData {
            records: &run.records,
            rationales: &run.rationales,
            sg_free_rationales: None,
            provider: p,
            eval_split: Split::Dev,
        };
        let table = run_ablation(&t, &f, &variants, &data).unwrap();
        let score = |v| table.row(v).unwrap().metrics.macro_f1;
        let full = score(Variant::Full);
        let best_single = [Variant::OnlyEmotion, Variant::OnlyTarget, Variant::OnlyContext]
            .map(score)
            .into_iter()
            .fold(0.0, f64::max);
        if full >= best_single {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {full:.3} vs {best_single:.3}"));
    }
    check(wins >= 4, format!("full >= max(E,T,C) on {wins}/5 seeds [{}]", lines.join("; ")))
}

fn determinism() -> Outcome {
    let run = planted_via_mock(42);
    let (t, f, p) = toy_configs(42);
    let t = TrainConfig { epochs: 20, ..t };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let out = train(&run.records, &run.rationales, &p, &t, &f).unwrap();
        let h = dir.path().join(format!("history{i}.jsonl"));
        let c = dir.path().join(format!("ckpt{i}.jsonl"));
        write_history(&h, &out.history).unwrap();
        save_checkpoint(&c, &out.best_params, &f).unwrap();
        files.push((std::fs::read(h).unwrap(), std::fs::read(c).unwrap()));
    }
    check(
        files[0] == files[1],
        format!("history {} bytes, checkpoint {} bytes, identical: {}", files[0].0.len(), files[0].1.len(), files[0] == files[1]),
    )
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(99);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.gen_range(1..60);
        let gold: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        let pred: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        let m = compute_metrics(&pred, &gold).unwrap();
        let b = brute_metrics(&pred, &gold);
        let same = m.confusion == b.confusion
            && m.macro_f1 == b.macro_f1
            && m.weighted_f1 == b.weighted_f1
            && (0..2).all(|c| {
                m.per_class[c].precision == b.precision[c] && m.per_class[c].recall == b.recall[c] && m.per_class[c].f1 == b.f1[c]
            });
        if !same {
            mismatches += 1;
        }
    }
    let zero = compute_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
    check(
        mismatches == 0 && zero.macro_f1 == 1.0 / 3.0,
        format!("{mismatches}/1000 mismatches; all-0 macro-F1 = {}", zero.macro_f1),
    )
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn prompt_goldens() -> Outcome {
    let sentences = [
        (Hop::Emotion, "E", "Identify the primary emotions conveyed through T_i and EOR_i of the meme X_i."),
        (
            Hop::Target,
            "T",
            "Based on the T_i and the EOR_i of the meme X_i, provide a rationale for whether this meme targets women. Include specific elements that support this claim.",
        ),
        (
            Hop::Context,
            "C",
            "Given the text T_i and the Entity-Object Relationships EOR_i of the meme, provide the broader context C of meme X_i.",
        ),
    ];
    let eors = [EorTriplet::new("woman", "standing in", "kitchen", 0.91), EorTriplet::new("man", "holding", "remote", 0.74)];
    let bless = std::env::var_os("M3HOP_BLESS").is_some();
    let mut problems = Vec::new();
    for (hop, tag, sentence) in sentences {
        let prompt = build_prompt(&PromptHop::default_for(hop), "Dinner will not cook itself", &eors);
        let path = golden_dir().join(format!("prompt_{tag}.txt"));
        if bless {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &prompt).unwrap();
        }
        match std::fs::read_to_string(&path) {
            Ok(golden) if golden == prompt => {}
            Ok(_) => problems.push(format!("{tag}: differs from golden")),
            Err(e) => problems.push(format!("{tag}: {e}")),
        }
        if !prompt.contains(sentence) {
            problems.push(format!("{tag}: instruction sentence missing"));
        }
        if !prompt.contains("Dinner will not cook itself") || !prompt.contains("woman standing in kitchen") {
            problems.push(format!("{tag}: meme fields not rendered"));
        }
    }
    check(problems.is_empty(), if problems.is_empty() { "E/T/C match golden files and contain instruction sentences".into() } else { problems.join("; ") })
}

fn cache_contract() -> Outcome {
    let data = planted(&PlantedSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = RationaleCache::open(dir.path()).unwrap();
    let mock = MockTransport::new(data.mock_answers.clone());
    let go = || {
        rationalize_dataset(&data.records, &PromptHop::defaults(), &LlmEndpointConfig::default(), &cache, &mock, &RationalizeOptions::default())
            .unwrap()
    };
    let first = go();
    let calls_after_first = mock.calls();
    let second = go();
    let extra = mock.calls() - calls_after_first;
    check(
        first.requests > 0 && second.requests == 0 && extra == 0 && second.rationales == first.rationales,
        format!(
            "first run {} requests, second run {} requests, {} cache hits, mock counter delta {extra}",
            first.requests, second.requests, second.cache_hits
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_correctness),
        ("mfb factorization oracle", mfb_oracle),
        ("attention degenerate cases", attention_degenerate),
        ("scl closed form", scl_closed_form),
        ("ce closed forms", ce_closed_forms),
        ("end-to-end overfit", overfit),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
        ("metrics oracle", metrics_oracle),
        ("prompt golden files", prompt_goldens),
        ("cache contract", cache_contract),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {name}: {detail}");
                failed.push(name);
            }
        }
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
