mod common;

use aos::aos::{aos_default_config, aos_step, eta_dec, eta_enc, AosConfig, AosState};
use aos::baselines::{empirical_fisher, ewc_step, ft_step, uoe_mask, uoe_step, EwcConfig, EwcState, SgdConfig};
use aos::datastream::LearnerBatch;
use aos::numcore::{Group, ParamSet};
use aos::seqmodel::{Sample, SeqModel};
use aos::Error;
use common::{random_params, random_sample, rng, small_config};

fn setup(seed: u64) -> (SeqModel, ParamSet<f64>, Vec<LearnerBatch<f64>>) {
    let cfg = small_config();
    let model = SeqModel::new(cfg.clone()).unwrap();
    let params = random_params(&model, seed);
    let mut r = rng(seed);
    let batches = (0..6)
        .map(|_| LearnerBatch::new((0..3).map(|_| random_sample(&cfg, &mut r)).collect()))
        .collect();
    (model, params, batches)
}

#[test]
fn first_ever_batch_adopts_adapted_model() {
    let (model, params, batches) = setup(1);
    let state = AosState::new(params, 0, 0);
    let next = aos_step(&model, &state, &batches[0], &aos_default_config()).unwrap();
    assert_eq!(next.final_params, next.adapted);
}

#[test]
fn self_distillation_is_a_fixed_point() {
    let (model, params, batches) = setup(2);
    let cfg = AosConfig {
        lambda: 1.0,
        ..aos_default_config()
    };
    let state = AosState::new(params.clone(), 500, 100);
    let next = aos_step(&model, &state, &batches[0], &cfg).unwrap();
    for (a, b) in next.adapted.flat().iter().zip(params.flat()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in next.final_params.flat().iter().zip(params.flat()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn final_moves_towards_adapted_by_group_weight() {
    let (model, params, batches) = setup(3);
    let cfg = AosConfig {
        tau: 2.0,
        tau2: 1.5,
        ..aos_default_config()
    };
    let mut state = AosState::new(params, 400, 90);
    for batch in &batches {
        let next = aos_step(&model, &state, batch, &cfg).unwrap();
        let eta_e = eta_enc(batch.frames as f64, state.frames_seen as f64, cfg.tau).unwrap();
        let eta_d = eta_dec(batch.tokens as f64, state.tokens_seen as f64, cfg.tau2).unwrap();
        let entries = state.final_params.entries().iter().zip(next.final_params.entries());
        for ((old, new), adapted) in entries.zip(next.adapted.entries()) {
            let eta = if old.group == Group::Decoder { eta_d } else { eta_e };
            let it = old.tensor.data().iter().zip(new.tensor.data()).zip(adapted.tensor.data());
            for ((&f, &f2), &a) in it {
                assert!(f2 >= f.min(a) && f2 <= f.max(a), "{} left the hull", old.name);
                assert!((f2 - f - eta * (a - f)).abs() < 1e-14, "{}", old.name);
            }
        }
        assert_eq!(next.frames_seen, state.frames_seen + batch.frames);
        assert_eq!(next.tokens_seen, state.tokens_seen + batch.tokens);
        assert_eq!(next.step, state.step + 1);
        state = next;
    }
}

#[test]
fn aos_step_is_deterministic() {
    let (model, params, batches) = setup(4);
    let state = AosState::new(params, 300, 60);
    let a = aos_step(&model, &state, &batches[1], &aos_default_config()).unwrap();
    let b = aos_step(&model, &state, &batches[1], &aos_default_config()).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.final_params.flat().iter().zip(b.final_params.flat()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn aos_step_reports_infeasible_batches() {
    let (model, params, _) = setup(5);
    let state = AosState::new(params, 300, 60);
    let bad = Sample {
        frames: aos::numcore::Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(),
        targets: vec![1, 1, 2],
    };
    let err = aos_step(&model, &state, &LearnerBatch::new(vec![bad]), &aos_default_config()).unwrap_err();
    assert!(matches!(err, Error::Infeasible { .. }), "{err:?}");
    assert!(aos_step(&model, &state, &LearnerBatch::new(vec![]), &aos_default_config()).is_err());
}

#[test]
fn fine_tuning_matches_adapted_trajectory_without_distillation() {
    let (model, params, batches) = setup(6);
    let cfg = AosConfig {
        lambda: 0.0,
        ..aos_default_config()
    };
    let sgd = SgdConfig {
        alpha: cfg.alpha,
        c: cfg.c,
    };
    let mut state = AosState::new(params.clone(), 300, 60);
    let mut ft = params;
    for batch in &batches {
        state = aos_step(&model, &state, batch, &cfg).unwrap();
        ft = ft_step(&model, &ft, batch, &sgd).unwrap();
        assert_eq!(state.adapted, ft);
    }
}

#[test]
fn uoe_freezes_decoder_and_norm_over_many_steps() {
    let (model, params, batches) = setup(7);
    let mut p = params.clone();
    for batch in &batches {
        p = uoe_step(&model, &p, batch, &SgdConfig::default()).unwrap();
    }
    let mut changed = false;
    for ((a, b), trainable) in params.entries().iter().zip(p.entries()).zip(uoe_mask(&params)) {
        if trainable {
            changed |= a.tensor != b.tensor;
        } else {
            assert!(a.group == Group::Decoder || a.norm);
            let bits = |t: &aos::numcore::Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor), "{}", a.name);
        }
    }
    assert!(changed);
}

/// Distance from the anchor over entries with positive Fisher weight.
fn weighted_drift(p: &ParamSet<f64>, state: &EwcState<f64>) -> f64 {
    p.flat()
        .iter()
        .zip(state.anchor.flat())
        .zip(state.fisher.flat())
        .filter(|(_, f)| *f > 0.0)
        .map(|((x, a), _)| (x - a) * (x - a))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn ewc_penalty_strength_limits_drift() {
    let (model, params, batches) = setup(8);
    let cfg = small_config();
    let mut r = rng(80);
    let fisher_data: Vec<Sample<f64>> = (0..20).map(|_| random_sample(&cfg, &mut r)).collect();
    let fisher = empirical_fisher(&model, &params, &fisher_data, 0.3).unwrap();
    assert!(fisher.flat().iter().all(|&f| f >= 0.0));
    let fmax = fisher.flat().iter().cloned().fold(0.0, f64::max);
    // keep α·λ·F below one so the penalized descent stays stable
    let scaled = fisher.map(|f| f / fmax);
    let drift = |lambda_ewc: f64| {
        let config = EwcConfig {
            sgd: SgdConfig { alpha: 0.005, c: 0.3 },
            lambda_ewc,
            refresh_every: 1000,
            ..EwcConfig::default()
        };
        let mut state = EwcState::new(params.clone(), scaled.clone()).unwrap();
        let mut p = params.clone();
        for batch in &batches {
            let (np, ns) = ewc_step(&model, &p, &state, batch, &config).unwrap();
            p = np;
            state = ns;
        }
        weighted_drift(&p, &state)
    };
    let (free, light, heavy) = (drift(0.0), drift(1.0), drift(100.0));
    assert!(light <= free, "{light} > {free}");
    assert!(heavy < light, "{heavy} >= {light}");
}

#[test]
fn ewc_refresh_moves_anchor_and_decays_fisher() {
    let (model, params, batches) = setup(9);
    let fisher = params.map(|_| 1.0);
    let config = EwcConfig {
        refresh_every: 2,
        gamma: 0.5,
        ..EwcConfig::default()
    };
    let state = EwcState::new(params.clone(), fisher).unwrap();
    let (p1, s1) = ewc_step(&model, &params, &state, &batches[0], &config).unwrap();
    assert_eq!(s1.anchor, params);
    assert_eq!(s1.fisher, state.fisher);
    let (p2, s2) = ewc_step(&model, &p1, &s1, &batches[1], &config).unwrap();
    assert_eq!(s2.anchor, p2);
    assert!(s2.fisher.flat().iter().all(|&f| (0.5..).contains(&f)));
    assert!(s2.fisher.flat().iter().any(|&f| f > 0.5));
}
