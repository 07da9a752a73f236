use std::collections::BTreeSet;

use uniattn_core::model::{Model, ModelConfig, Positional, VariantSpec};
use uniattn_core::training::{gradcheck, loss, loss_and_grads, random_tokens};
use uniattn_core::uniattn::{CompensationSet, SuperblockPlan};
use uniattn_core::RngStream;

fn small_config(kv_heads: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(4, 16, 11);
    cfg.d_head = 4;
    cfg.n_heads = 4;
    cfg.n_kv_heads = kv_heads;
    cfg
}

fn with_random_comp(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::init(cfg.with_variant(VariantSpec::Baseline), &mut RngStream::new(seed)).unwrap();
    let mut comp = CompensationSet::zeros(&cfg);
    let mut rng = RngStream::new(seed + 1);
    for (_, w) in comp.entries_mut() {
        *w = rng.gaussian_matrix(16, 16).scale(0.1);
    }
    m.config = cfg;
    m.compensation = Some(comp);
    m.validate().unwrap();
    m
}

fn variants() -> Vec<(&'static str, Model)> {
    let plan = SuperblockPlan::new(vec![(1, 2), (3, 4)]).unwrap();
    let long = SuperblockPlan::new(vec![(2, 4)]).unwrap();
    let base = small_config(4);
    let init = |cfg: ModelConfig| Model::init(cfg, &mut RngStream::new(5)).unwrap();
    let mut no_rope = base.clone();
    no_rope.positional = Positional::None;
    vec![
        ("baseline", init(base.clone())),
        ("baseline-no-rope", init(no_rope)),
        ("gqa", init(small_config(2))),
        ("cla", init(base.with_variant(VariantSpec::Cla { plan: plan.clone() }))),
        ("cla-gqa", init(small_config(2).with_variant(VariantSpec::Cla { plan: long.clone() }))),
        (
            "llmdrop",
            init(base.with_variant(VariantSpec::LlmDrop { dropped: BTreeSet::from([2, 3]) })),
        ),
        ("uniattn", init(base.with_variant(VariantSpec::UniAttn { plan: long.clone(), compensated: false }))),
        (
            "uniattn-comp",
            with_random_comp(base.with_variant(VariantSpec::UniAttn { plan: long, compensated: true }), 5),
        ),
        (
            "uniattn-comp-pairs",
            with_random_comp(base.with_variant(VariantSpec::UniAttn { plan, compensated: true }), 6),
        ),
    ]
}

#[test]
fn analytic_gradients_match_central_differences() {
    let batch = random_tokens(2, 7, 11, &mut RngStream::new(9));
    for (name, m) in variants() {
        let report = gradcheck(&m, &batch, 50, 1e-5, &mut RngStream::new(10)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {}", report.max_rel_error);
        assert!(report.samples.iter().any(|s| s.analytic != 0.0));
    }
}

/// Every entry of the W_c and bottom-layer query/key gradients, where the
/// reused-probability adjoints accumulate.
#[test]
fn shared_adjoints_match_differences_entrywise() {
    let plan = SuperblockPlan::new(vec![(1, 3)]).unwrap();
    let cfg = small_config(4).with_variant(VariantSpec::UniAttn { plan, compensated: true });
    let m = with_random_comp(cfg, 21);
    let batch = random_tokens(1, 6, 11, &mut RngStream::new(4));
    let (_, g) = loss_and_grads(&m, &batch).unwrap();
    let h = 1e-5;
    let check = |get: &dyn Fn(&mut Model) -> &mut f64, analytic: f64| {
        let mut p = m.clone();
        *get(&mut p) += h;
        let plus = loss(&p, &batch).unwrap();
        *get(&mut p) -= 2.0 * h;
        let minus = loss(&p, &batch).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        assert!(uniattn_core::training::rel_error(analytic, fd) < 1e-4, "{analytic} vs {fd}");
    };
    for i in (0..256).step_by(17) {
        check(&|p: &mut Model| &mut p.weights.layers[0].wq.data_mut()[i], g.weights.layers[0].wq.data()[i]);
        check(&|p: &mut Model| &mut p.weights.layers[0].wk.data_mut()[i], g.weights.layers[0].wk.data()[i]);
        check(
            &|p: &mut Model| {
                let c = p.compensation.as_mut().unwrap();
                &mut c.entries_mut().find(|(l, _)| **l == 3).unwrap().1.data_mut()[i]
            },
            g.wc[&3].data()[i],
        );
    }
    // Reusing layers never touch their own query and key projections.
    assert_eq!(g.weights.layers[1].wq.max_abs(), 0.0);
    assert_eq!(g.weights.layers[2].wk.max_abs(), 0.0);
}

#[test]
fn batch_loss_is_order_invariant() {
    let (_, m) = variants().remove(6);
    let batch = random_tokens(4, 6, 11, &mut RngStream::new(2));
    let mut rev = batch.clone();
    rev.reverse();
    let (la, ga) = loss_and_grads(&m, &batch).unwrap();
    let (lb, gb) = loss_and_grads(&m, &rev).unwrap();
    assert!((la - lb).abs() < 1e-14);
    let mut diff = ga.clone();
    diff.add_scaled(-1.0, &gb).unwrap();
    assert!(diff.norm() < 1e-12);
}

#[test]
fn non_finite_weights_report_the_layer() {
    let mut m = Model::init(small_config(4), &mut RngStream::new(1)).unwrap();
    m.weights.layers[2].w_down.data_mut()[0] = f64::INFINITY;
    let err = loss_and_grads(&m, &[vec![1, 2, 3]]).unwrap_err();
    assert!(matches!(err, uniattn_core::Error::NanLoss { layer: Some(3) }), "{err:?}");
}
