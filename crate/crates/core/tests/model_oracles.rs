mod common;

use common::*;
use m3hop_core::encoder::ResolvedFeatures;
use m3hop_core::fusion::{
    cross_attend, forward, init_params, mfb_fuse, ActiveStages, FusionConfig, Stage, ValueSource,
};
use m3hop_core::numerics::{Graph, ParamStore};
use rand::Rng;

fn features(cfg: &FusionConfig, lens: [usize; 3], seed: u64) -> ResolvedFeatures {
    let mut r = rng(seed);
    ResolvedFeatures {
        ft: rand_tensor(&mut r, 1, cfg.d_t),
        fv: rand_tensor(&mut r, 1, cfg.d_v),
        tokens: lens.map(|l| Some(rand_tensor(&mut r, l, cfg.d_t))),
    }
}

fn p(params: &ParamStore, path: &str) -> Vec<Vec<f64>> {
    rows(params.get(path).unwrap())
}

fn stage_oracle(params: &ParamStore, stage: Stage, query: &[f64], tokens: &[Vec<f64>], fused: bool) -> Vec<f64> {
    let s = stage.prefix();
    attention_oracle(
        query,
        tokens,
        &p(params, &format!("{s}.Wq")),
        &p(params, &format!("{s}.Wk")),
        &p(params, &format!("{s}.Wv")),
        params.get(&format!("{s}.ln_gain")).unwrap().data(),
        params.get(&format!("{s}.ln_bias")).unwrap().data(),
        fused,
    )
}

#[test]
fn mfb_matches_bilinear_form_on_random_instances() {
    let mut r = rng(11);
    for k in [1, 2, 5] {
        for _ in 0..100 {
            let cfg = FusionConfig {
                d_t: r.gen_range(2..9),
                d_v: r.gen_range(2..9),
                o: r.gen_range(2..7),
                k_mfb: k,
                ..FusionConfig::tiny()
            };
            let params = init_params(&FusionConfig { seed: r.gen(), ..cfg.clone() }).unwrap();
            let ft = rand_vec(&mut r, cfg.d_t);
            let fv = rand_vec(&mut r, cfg.d_v);
            let mut g = Graph::new();
            let a = g.constant(m3hop_core::numerics::Tensor::row(ft.clone()).unwrap()).unwrap();
            let b = g.constant(m3hop_core::numerics::Tensor::row(fv.clone()).unwrap()).unwrap();
            let m = mfb_fuse(&mut g, a, b, &params, &cfg).unwrap();
            let want = mfb_bilinear_oracle(&ft, &fv, &p(&params, "mfb.U"), &p(&params, "mfb.V"), k);
            let diff = max_abs_diff(g.value(m).data(), &want);
            assert!(diff < 1e-10, "k={k}: {diff}");
        }
    }
}

#[test]
fn attention_matches_loop_oracle_at_three_tokens() {
    for mode in [ValueSource::Rationale, ValueSource::Fused] {
        let cfg = FusionConfig {
            value_source: mode,
            ..FusionConfig::tiny()
        };
        let params = init_params(&cfg).unwrap();
        let mut r = rng(5);
        let query = rand_tensor(&mut r, 1, cfg.o);
        let tokens = rand_tensor(&mut r, 3, cfg.d_t);
        for stage in Stage::ALL {
            let mut g = Graph::new();
            let q = g.constant(query.clone()).unwrap();
            let t = g.constant(tokens.clone()).unwrap();
            let out = cross_attend(&mut g, q, t, &params, stage, &cfg).unwrap();
            let want = stage_oracle(&params, stage, query.data(), &rows(&tokens), mode == ValueSource::Fused);
            assert!(max_abs_diff(g.value(out).data(), &want) < 1e-10);
        }
    }
}

#[test]
fn single_token_gets_full_weight() {
    let cfg = FusionConfig::tiny();
    let params = init_params(&cfg).unwrap();
    let mut r = rng(8);
    let query = rand_vec(&mut r, cfg.o);
    let token = rand_vec(&mut r, cfg.d_t);
    let mut g = Graph::new();
    let q = g.constant(m3hop_core::numerics::Tensor::row(query.clone()).unwrap()).unwrap();
    let t = g.constant(m3hop_core::numerics::Tensor::row(token.clone()).unwrap()).unwrap();
    let out = cross_attend(&mut g, q, t, &params, Stage::Emf, &cfg).unwrap();
    // weight 1 on the only token: LN(token·Wv + query)
    let v = vec_mat(&token, &p(&params, "emf.Wv"));
    let resid: Vec<f64> = v.iter().zip(&query).map(|(a, b)| a + b).collect();
    let gain = params.get("emf.ln_gain").unwrap().data();
    let bias = params.get("emf.ln_bias").unwrap().data();
    assert!(max_abs_diff(g.value(out).data(), &layer_norm_loop(&resid, gain, bias, 1e-5)) < 1e-12);
}

#[test]
fn fused_values_ignore_tokens() {
    let cfg = FusionConfig {
        value_source: ValueSource::Fused,
        ..FusionConfig::tiny()
    };
    let params = init_params(&cfg).unwrap();
    let mut r = rng(21);
    let query = rand_tensor(&mut r, 1, cfg.o);
    let expected = {
        let v = vec_mat(query.data(), &p(&params, "timr.Wv"));
        let resid: Vec<f64> = v.iter().zip(query.data()).map(|(a, b)| a + b).collect();
        layer_norm_loop(
            &resid,
            params.get("timr.ln_gain").unwrap().data(),
            params.get("timr.ln_bias").unwrap().data(),
            1e-5,
        )
    };
    for (len, scale) in [(1, 1.0), (4, 10.0), (9, 0.01)] {
        let tokens = rand_tensor(&mut r, len, cfg.d_t).map(|x| x * scale);
        let mut g = Graph::new();
        let q = g.constant(query.clone()).unwrap();
        let t = g.constant(tokens).unwrap();
        let out = cross_attend(&mut g, q, t, &params, Stage::Timr, &cfg).unwrap();
        assert!(max_abs_diff(g.value(out).data(), &expected) < 1e-10);
    }
}

#[test]
fn full_forward_matches_straight_line_oracle() {
    for mode in [ValueSource::Rationale, ValueSource::Fused] {
        let cfg = FusionConfig {
            value_source: mode,
            seed: 3,
            ..FusionConfig::tiny()
        };
        let params = init_params(&cfg).unwrap();
        let f = features(&cfg, [4, 2, 6], 17);
        let trace = forward(&f, &params, &cfg, ActiveStages::all()).unwrap();

        let fused = mode == ValueSource::Fused;
        let m = mfb_bilinear_oracle(f.ft.data(), f.fv.data(), &p(&params, "mfb.U"), &p(&params, "mfb.V"), cfg.k_mfb);
        let tok = |i: usize| rows(f.tokens[i].as_ref().unwrap());
        let hf1 = stage_oracle(&params, Stage::Emf, &m, &tok(0), fused);
        let hf2 = stage_oracle(&params, Stage::Timr, &hf1, &tok(1), fused);
        let hf3 = stage_oracle(&params, Stage::Ccmi, &hf2, &tok(2), fused);
        let logits: Vec<f64> = vec_mat(&hf3, &p(&params, "head.W"))
            .iter()
            .zip(params.get("head.b").unwrap().data())
            .map(|(a, b)| a + b)
            .collect();
        let probs = softmax_loop(&logits);

        assert!(max_abs_diff(trace.m.data(), &m) < 1e-9);
        assert!(max_abs_diff(trace.hf1.data(), &hf1) < 1e-9);
        assert!(max_abs_diff(trace.hf2.data(), &hf2) < 1e-9);
        assert!(max_abs_diff(trace.hf3.data(), &hf3) < 1e-9);
        assert!(max_abs_diff(trace.logits.data(), &logits) < 1e-9);
        assert!(max_abs_diff(trace.probabilities.data(), &probs) < 1e-9);
    }
}

#[test]
fn dropped_stages_pass_state_through() {
    let cfg = FusionConfig::tiny();
    let params = init_params(&cfg).unwrap();
    let mut f = features(&cfg, [3, 3, 3], 2);
    let only_t = ActiveStages {
        emotion: false,
        target: true,
        context: false,
    };
    let a = forward(&f, &params, &cfg, only_t).unwrap();
    assert_eq!(a.hf1, a.m);
    assert_eq!(a.hf3, a.hf2);
    f.tokens[0] = None;
    f.tokens[2] = None;
    assert_eq!(forward(&f, &params, &cfg, only_t).unwrap(), a);
    assert!(forward(&f, &params, &cfg, ActiveStages::all()).is_err());
    let none = forward(&f, &params, &cfg, ActiveStages::none()).unwrap();
    assert_eq!(none.hf3, none.m);
}
