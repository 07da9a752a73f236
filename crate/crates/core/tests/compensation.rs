use uniattn_core::linalg::{least_squares, softmax_rows};
use uniattn_core::model::{Model, ModelConfig, Positional, VariantSpec, Weights};
use uniattn_core::uniattn::{
    compute_epsilon, error_report, group_average, init_compensation, init_compensation_ordered,
    logits_gap, CalibrationBatch, InitMode, InitOrder, SuperblockPlan,
};
use uniattn_core::{Matrix, RngStream};

fn model(layers: usize, d: usize, seed: u64) -> Model {
    Model::init(ModelConfig::toy(layers, d, 31), &mut RngStream::new(seed)).unwrap()
}

fn batch(n: usize, len: usize, seed: u64) -> CalibrationBatch {
    let mut rng = RngStream::new(seed);
    CalibrationBatch::new((0..n).map(|_| (0..len).map(|_| rng.below(31)).collect()).collect()).unwrap()
}

fn plan(groups: &[(usize, usize)]) -> SuperblockPlan {
    SuperblockPlan::new(groups.to_vec()).unwrap()
}

fn residual(x: &Matrix, w: &Matrix, e: &Matrix) -> f64 {
    x.matmul(w).unwrap().sub(e).unwrap().norm_sq()
}

fn uni(m: &Model, p: &SuperblockPlan) -> Model {
    m.with_variant(VariantSpec::UniAttn { plan: p.clone(), compensated: false }, None).unwrap()
}

#[test]
fn singleton_plan_has_no_error_and_no_matrices() {
    let m = model(4, 32, 1);
    let p = plan(&[(1, 1), (2, 2), (3, 3), (4, 4)]);
    let calib = batch(4, 8, 2);
    assert!(init_compensation(&m, &p, &calib, 1).unwrap().is_empty());
    assert!(error_report(&m, &p, None, &calib).unwrap().is_empty());
    let a = m.forward(&[1, 2, 3], true).unwrap().trace.unwrap();
    let b = uni(&m, &p).forward(&[1, 2, 3], true).unwrap().trace.unwrap();
    for l in 1..=4 {
        assert_eq!(compute_epsilon(&a, &b, l).unwrap().max_abs(), 0.0);
    }
    assert!(compute_epsilon(&a, &b, 5).is_err());
    assert!(compute_epsilon(&a, &b, 0).is_err());
}

#[test]
fn epsilon_at_bottom_layers_is_zero_until_inputs_diverge() {
    let m = model(5, 32, 3);
    let p = plan(&[(2, 3)]);
    let toks = [4, 1, 7, 7, 2, 9];
    let a = m.forward(&toks, true).unwrap().trace.unwrap();
    let b = uni(&m, &p).forward(&toks, true).unwrap().trace.unwrap();
    assert_eq!(compute_epsilon(&a, &b, 1).unwrap().max_abs(), 0.0);
    assert_eq!(compute_epsilon(&a, &b, 2).unwrap().max_abs(), 0.0);
    assert!(compute_epsilon(&a, &b, 3).unwrap().max_abs() > 0.0);
}

fn rms(x: &Matrix, g: &Matrix, eps: f64) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let ms = x.row(i).iter().map(|v| v * v).sum::<f64>() / x.cols() as f64;
        x[(i, j)] * g.data()[j] / (ms + eps).sqrt()
    })
}

/// Multi-head attention output `Σ_h P_h V_h W_o` for given probabilities.
fn mha(probs: &[Matrix], v: &Matrix, wo: &Matrix, dk: usize) -> Matrix {
    let mut concat = Matrix::zeros(v.rows(), wo.rows());
    for (h, p) in probs.iter().enumerate() {
        concat.add_cols_range(h * dk, &p.matmul(&v.cols_range(h * dk, dk)).unwrap());
    }
    concat.matmul(wo).unwrap()
}

#[test]
fn epsilon_matches_termwise_decomposition() {
    let mut cfg = ModelConfig::toy(4, 32, 31);
    cfg.positional = Positional::None;
    let m = Model::init(cfg.clone(), &mut RngStream::new(4)).unwrap();
    let p = plan(&[(1, 3)]);
    let toks = [3, 14, 15, 9, 2, 6, 5];
    let ori = m.forward(&toks, true).unwrap().trace.unwrap();
    let un = uni(&m, &p).forward(&toks, true).unwrap().trace.unwrap();
    let s_i = ori.layers[0].probs.clone().unwrap();
    let dk = cfg.d_head;
    for layer in [2usize, 3] {
        let w = &m.weights.layers[layer - 1];
        let (x_ori, x_uni) = (&ori.layers[layer - 1].x_in, &un.layers[layer - 1].x_in);
        let xn_ori = rms(x_ori, &w.attn_norm, cfg.norm_eps);
        let xn_uni = rms(x_uni, &w.attn_norm, cfg.norm_eps);
        let (q, k) = (xn_ori.matmul(&w.wq).unwrap(), xn_ori.matmul(&w.wk).unwrap());
        let own: Vec<Matrix> = (0..cfg.n_heads)
            .map(|h| {
                let s = q.cols_range(h * dk, dk).matmul_t(&k.cols_range(h * dk, dk)).unwrap();
                softmax_rows(&s.scale(1.0 / (dk as f64).sqrt()), true).unwrap()
            })
            .collect();
        let v_ori = xn_ori.matmul(&w.wv).unwrap();
        let v_uni = xn_uni.matmul(&w.wv).unwrap();
        let diff: Vec<Matrix> = own.iter().zip(&s_i).map(|(a, b)| a.sub(b).unwrap()).collect();
        let mut want = x_ori.sub(x_uni).unwrap().add(&mha(&diff, &v_ori, &w.wo, dk)).unwrap();
        if layer == 2 {
            // Inputs agree at the first reusing layer, so the two-term form is exact.
            assert_eq!(x_ori, x_uni);
        } else {
            let dv = v_ori.sub(&v_uni).unwrap();
            want.add_assign(&mha(&s_i, &dv, &w.wo, dk)).unwrap();
        }
        let got = compute_epsilon(&ori, &un, layer).unwrap();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-10, "layer {layer}");
    }
}

/// Rebuilds the averaged system the initializer solves for the first reusing layer.
fn first_layer_system(m: &Model, p: &SuperblockPlan, calib: &CalibrationBatch, v: usize) -> (Matrix, Matrix) {
    let layer = p.reusing_layers()[0];
    let u = uni(m, p);
    let mut xs = Vec::new();
    let mut es = Vec::new();
    for s in calib.sequences() {
        let a = m.forward(s, true).unwrap().trace.unwrap();
        let b = u.forward(s, true).unwrap().trace.unwrap();
        xs.push(b.layers[layer - 1].x_in.clone());
        es.push(compute_epsilon(&a, &b, layer).unwrap());
    }
    (
        group_average(&Matrix::stack_rows(&xs).unwrap(), v),
        group_average(&Matrix::stack_rows(&es).unwrap(), v),
    )
}

#[test]
fn closed_form_beats_random_candidates_without_averaging() {
    let m = model(4, 32, 5);
    let p = plan(&[(2, 3)]);
    let calib = batch(6, 12, 6);
    let s = calib.instances();
    let comp = init_compensation(&m, &p, &calib, s).unwrap();
    assert_eq!(comp.meta.v, s);
    assert_eq!(comp.meta.mode, InitMode::ClosedForm);
    let (x, e) = first_layer_system(&m, &p, &calib, s);
    let wc = comp.get(3).unwrap();
    let best = residual(&x, wc, &e);
    let mut rng = RngStream::new(7);
    for i in 0..500 {
        let scale = [1.0, 0.1, 0.01, 1e-3][i % 4];
        let cand = if i % 2 == 0 {
            rng.gaussian_matrix(32, 32).scale(scale)
        } else {
            wc.add(&rng.gaussian_matrix(32, 32).scale(scale)).unwrap()
        };
        assert!(best <= residual(&x, &cand, &e) + 1e-12);
    }
}

#[test]
fn closed_form_matches_gradient_descent_minimizer() {
    let m = model(4, 32, 8);
    let p = plan(&[(2, 3)]);
    let calib = batch(8, 16, 9);
    let v = 16;
    let comp = init_compensation(&m, &p, &calib, v).unwrap();
    let (x, e) = first_layer_system(&m, &p, &calib, v);
    // Gradient descent from zero stays in the row space of x and converges
    // to the minimum-norm minimizer.
    let sigma_max_sq = {
        let g = x.t_matmul(&x).unwrap();
        let mut b = Matrix::from_fn(32, 1, |_, _| 1.0);
        for _ in 0..200 {
            let nb = g.matmul(&b).unwrap();
            b = nb.scale(1.0 / nb.norm());
        }
        g.matmul(&b).unwrap().norm()
    };
    let step = 1.0 / sigma_max_sq;
    let mut w = Matrix::zeros(32, 32);
    for _ in 0..2_000_000 {
        let grad = x.t_matmul(&x.matmul(&w).unwrap().sub(&e).unwrap()).unwrap();
        if grad.norm() < 1e-10 {
            break;
        }
        w.axpy(-step, &grad).unwrap();
    }
    let wc = comp.get(3).unwrap();
    let rel = w.sub(wc).unwrap().norm() / wc.norm();
    assert!(rel < 1e-6, "relative gap {rel}");
}

#[test]
fn zero_compensation_leaves_error_unchanged_and_closed_form_reduces_it() {
    let m = model(6, 32, 10);
    let p = plan(&[(3, 6)]);
    let calib = batch(16, 16, 11);
    let zero = uniattn_core::uniattn::CompensationSet::zeros(
        &m.config.with_variant(VariantSpec::UniAttn { plan: p.clone(), compensated: true }),
    );
    for e in error_report(&m, &p, Some(&zero), &calib).unwrap() {
        assert_eq!(e.uncompensated, e.compensated);
    }
    // Without averaging the solve minimizes the per-token error at the first
    // reusing layer, where zero is one of the candidates.
    let comp = init_compensation(&m, &p, &calib, calib.instances()).unwrap();
    let report = error_report(&m, &p, Some(&comp), &calib).unwrap();
    assert_eq!(report.iter().map(|e| e.layer).collect::<Vec<_>>(), vec![4, 5, 6]);
    assert!(report[0].compensated <= report[0].uncompensated);
}

#[test]
fn bottom_up_is_no_worse_than_top_down_at_the_last_layer() {
    let m = model(6, 32, 12);
    let p = plan(&[(4, 6)]);
    let calib = batch(16, 16, 13);
    let last = |order| {
        let c = init_compensation_ordered(&m, &p, &calib, 1, order).unwrap();
        error_report(&m, &p, Some(&c), &calib).unwrap().last().unwrap().compensated
    };
    let (up, down) = (last(InitOrder::BottomUp), last(InitOrder::TopDown));
    assert!(up <= down, "bottom-up {up} top-down {down}");
}

#[test]
fn initialization_is_deterministic_and_reduces_logit_gap() {
    let m = model(6, 32, 14);
    let p = plan(&[(3, 6)]);
    let calib = batch(16, 16, 15);
    let a = init_compensation(&m, &p, &calib, 1).unwrap();
    let b = init_compensation(&m, &p, &calib, 1).unwrap();
    assert_eq!(a, b);
    let comp_model = m
        .with_variant(VariantSpec::UniAttn { plan: p.clone(), compensated: true }, Some(a))
        .unwrap();
    assert!(logits_gap(&comp_model, &calib).unwrap() < logits_gap(&uni(&m, &p), &calib).unwrap());
}

#[test]
fn degenerate_activations_fall_back_to_zero() {
    let cfg = ModelConfig::toy(3, 32, 31);
    let m = Model::new(cfg.clone(), Weights::zeros_like(&cfg), None).unwrap();
    let p = plan(&[(1, 3)]);
    let comp = init_compensation(&m, &p, &batch(2, 4, 1), 1).unwrap();
    assert_eq!(comp.meta.warnings.len(), 2);
    assert!(comp.entries().values().all(|w| w.max_abs() == 0.0));
}

#[test]
fn rejects_bad_arguments() {
    let m = model(3, 32, 16);
    assert!(init_compensation(&m, &plan(&[(1, 2)]), &batch(2, 4, 1), 0).is_err());
    assert!(init_compensation(&m, &plan(&[(1, 4)]), &batch(2, 4, 1), 1).is_err());
    assert!(init_compensation(&m, &plan(&[(1, 2)]), &batch(2, 65, 1), 1).is_err());
}

#[test]
fn least_squares_agrees_with_initializer() {
    let m = model(4, 32, 17);
    let p = plan(&[(1, 2)]);
    let calib = batch(4, 8, 18);
    let comp = init_compensation(&m, &p, &calib, 3).unwrap();
    let (x, e) = first_layer_system(&m, &p, &calib, 3);
    assert_eq!(&least_squares(&x, &e).unwrap(), comp.get(2).unwrap());
}
