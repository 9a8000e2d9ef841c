mod common;

use common::*;
use selfaug_core::graph::Graph;
use selfaug_core::model::{EncoderModel, HeadKind, Mode, Pooling};
use selfaug_core::objective::{dual_forward, GradientFlow};

#[test]
fn zero_injection_reproduces_plain_forward() {
    for seed in 0..10 {
        assert!(zero_injection_is_plain_forward(seed), "seed {seed}");
    }
}

#[test]
fn tied_self_injection_doubles_the_state() {
    for seed in 0..10 {
        assert!(self_injection_doubles(seed), "seed {seed}");
    }
}

#[test]
fn stop_blocks_gradient_into_f() {
    let p = probe_c_loss_wrt_f(GradientFlow::Stop, 3);
    assert!(p.backprop_max < 1e-10, "{}", p.backprop_max);
    // the forward value still moves with F, only the backward path is cut
    assert!(p.numeric.abs() > 1e-8);
}

#[test]
fn flow_gradient_matches_finite_difference() {
    let p = probe_c_loss_wrt_f(GradientFlow::Flow, 3);
    assert!(p.backprop_max > 1e-6);
    assert!(rel_err(p.analytic, p.numeric) < 1e-4, "{} vs {}", p.analytic, p.numeric);
}

#[test]
fn pooled_views_come_from_the_right_layers() {
    let mut r = rng(5);
    let f = EncoderModel::init(tiny_config(3, HeadKind::Binary, Pooling::Mean, 0.0), 5).unwrap();
    let c = EncoderModel::init(tiny_config(3, HeadKind::Binary, Pooling::Mean, 0.0), 6).unwrap();
    let batch = tiny_batch(&mut r, HeadKind::Binary);
    let mut cfg = dual_cfg(2, 1);
    cfg.pooling = Pooling::Mean;
    let mut g = Graph::new();
    let out = dual_forward(&mut g, &f, &c, &batch, &cfg, Mode::Eval, &mut rng(0), &mut rng(0)).unwrap();
    let want_i = selfaug_core::model::pool(&mut g, out.stream_f.hidden[2], &batch.mask, Pooling::Mean).unwrap();
    let want_j = selfaug_core::model::pool(&mut g, out.stream_c.hidden[1], &batch.mask, Pooling::Mean).unwrap();
    assert_eq!(g.value(out.pooled_i), g.value(want_i));
    assert_eq!(g.value(out.pooled_j), g.value(want_j));
}

#[test]
fn out_of_range_layers_are_rejected() {
    let mut r = rng(1);
    let m = EncoderModel::init(tiny_config(2, HeadKind::Binary, Pooling::Cls, 0.0), 1).unwrap();
    let batch = tiny_batch(&mut r, HeadKind::Binary);
    let cfg = dual_cfg(3, 0);
    let mut g = Graph::new();
    let err = dual_forward(&mut g, &m, &m, &batch, &cfg, Mode::Eval, &mut rng(0), &mut rng(0)).unwrap_err();
    assert!(err.is_config_error());
}
