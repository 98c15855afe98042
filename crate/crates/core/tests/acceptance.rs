//! End-to-end acceptance gate. Each test prints one pass/fail line for its
//! criterion; thresholds for the training-based criteria were pre-registered
//! from pilot runs at these exact seeds.

use once_cell::sync::Lazy;
use rayon::prelude::*;

use ictd_core::attention::{forward, make_mask, AttnKind, Layer, MaskKind, TransformerParams};
use ictd_core::autodiff::{finite_diff, grad_output, tf1_closed_form};
use ictd_core::constructions::theta_star;
use ictd_core::metrics::{
    elementwise_stats, implicit_weight_similarity, msve, normalize_for_viz,
    sensitivity_similarity, td_baseline, value_difference,
};
use ictd_core::mrp::{gen_boyan, sample_trajectory, stationary_distribution, true_value};
use ictd_core::numerics::{Matrix, SeededRng};
use ictd_core::prompt::{build_prompt, Prompt};
use ictd_core::training::{fit_alpha_for_vtd, train, TrainConfig, TrainOutput};
use ictd_core::verify::{
    demo_msve_vs_context, invariant_set_report, verify_equivalence, verify_invariant_set,
    DemoConfig, EquivalenceKind,
};

fn report(criterion: usize, label: &str, pass: bool) {
    println!(
        "acceptance {criterion} ({label}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({label}) failed");
}

const EMERGENCE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn emergence_cfg(l: usize, seed: u64) -> TrainConfig {
    TrainConfig { k: 1000, l, seed, log_every: 100_000, ..TrainConfig::default() }
}

static TRAINED_L3: Lazy<Vec<TrainOutput>> = Lazy::new(|| {
    EMERGENCE_SEEDS
        .par_iter()
        .map(|&seed| train(&emergence_cfg(3, seed)).unwrap())
        .collect()
});

static TRAINED_L1: Lazy<Vec<TrainOutput>> = Lazy::new(|| {
    EMERGENCE_SEEDS
        .par_iter()
        .map(|&seed| train(&emergence_cfg(1, seed)).unwrap())
        .collect()
});

/// Normalized (p_bottom_right, p_others, tr_left, tr_right, q_others),
/// averaged over the trained seeds.
fn mean_stats(outs: &[TrainOutput], d: usize) -> (f64, f64, f64, f64, f64) {
    let mut acc = [0.0; 5];
    for out in outs {
        let lay = &out.params.layers[0];
        let (p0, q0) = normalize_for_viz(&lay.p, &lay.q).unwrap();
        let (a, b, c, e, f) = elementwise_stats(&p0, &q0, d).unwrap();
        for (slot, v) in [a, b, c, e, f].into_iter().enumerate() {
            acc[slot] += v;
        }
    }
    let k = outs.len() as f64;
    (acc[0] / k, acc[1] / k, acc[2] / k, acc[3] / k, acc[4] / k)
}

#[test]
fn criterion_1_forward_pass_equivalence() {
    let kinds = [
        EquivalenceKind::Td0,
        EquivalenceKind::Td0OneLayer,
        EquivalenceKind::Rg,
        EquivalenceKind::TdLambda { lambda: 0.7 },
        EquivalenceKind::TdLambda { lambda: 1.0 },
        EquivalenceKind::Avg,
    ];
    let mut pass = true;
    for kind in kinds {
        let rep = verify_equivalence(kind, 40, 20, 4, 30).unwrap();
        if rep.max_diff() > 1e-8 {
            eprintln!("{}: max diff {}", rep.kind, rep.max_diff());
            pass = false;
        }
    }
    report(1, "forward-pass equivalence", pass);
}

#[test]
fn criterion_2_mask_degeneration() {
    let mut pass = true;
    for n in [1, 5, 20, 30] {
        let lambda0 = make_mask(&MaskKind::TdLambda { lambda: 0.0, n }).unwrap();
        let td0 = make_mask(&MaskKind::Td0 { n }).unwrap();
        for i in 0..n + 1 {
            for j in 0..n + 1 {
                pass &= lambda0[(i, j)] == td0[(i, j)];
            }
        }
    }
    report(2, "mask degeneration", pass);
}

fn random_params(
    rng: &mut SeededRng,
    d: usize,
    n: usize,
    l: usize,
    shared: bool,
    attn: AttnKind,
) -> TransformerParams {
    let dim = 2 * d + 1;
    let stored = if shared { 1 } else { l };
    let layers = (0..stored)
        .map(|_| Layer {
            p: Matrix::from_fn(dim, dim, |_, _| rng.uniform(-0.3, 0.3)),
            q: Matrix::from_fn(dim, dim, |_, _| rng.uniform(-0.3, 0.3)),
        })
        .collect();
    TransformerParams::new(layers, shared, attn, MaskKind::Td0 { n }, l).unwrap()
}

fn random_prompt(rng: &mut SeededRng, d: usize, n: usize) -> Prompt {
    let phis: Vec<Vec<f64>> = (0..n + 1).map(|_| rng.uniform_vec(d, -1.0, 1.0)).collect();
    let rewards = rng.uniform_vec(n, -1.0, 1.0);
    let query = rng.uniform_vec(d, -1.0, 1.0);
    build_prompt(&phis, &rewards, 0.9, &query).unwrap()
}

#[test]
fn criterion_3_gradient_correctness() {
    let mut rng = SeededRng::new(31);
    let (d, n) = (3, 8);
    let mut pass = true;

    for attn in [AttnKind::Linear, AttnKind::Softmax] {
        for trial in 0..3 {
            let params = random_params(&mut rng, d, n, 3, true, attn);
            let prompt = random_prompt(&mut rng, d, n);
            let grads = grad_output(&prompt, &params).unwrap();
            let fd = finite_diff(&prompt, &params, 1e-6).unwrap();
            for (g, f) in grads.layers.iter().zip(&fd) {
                for (a, b) in [(&g.p, &f.p), (&g.q, &f.q)] {
                    for i in 0..a.rows() {
                        for j in 0..a.cols() {
                            let rel = (a[(i, j)] - b[(i, j)]).abs()
                                / (1.0_f64).max(b[(i, j)].abs());
                            if rel > 1e-5 {
                                eprintln!("{attn:?} trial {trial}: rel err {rel}");
                                pass = false;
                            }
                        }
                    }
                }
            }
        }
    }

    // single layer vs closed form
    for _ in 0..10 {
        let params = random_params(&mut rng, d, n, 1, false, AttnKind::Linear);
        let prompt = random_prompt(&mut rng, d, n);
        let grads = grad_output(&prompt, &params).unwrap();
        let cf = tf1_closed_form(&prompt, &params.layers[0].p, &params.layers[0].q).unwrap();
        pass &= (grads.output - cf.value).abs() <= 1e-10;
        let g = &grads.layers[0];
        for i in 0..d {
            pass &= (g.p[(2 * d, i)] - cf.grad_p[i]).abs() <= 1e-10;
            pass &= (g.p[(2 * d, d + i)] - cf.grad_p[d + i]).abs() <= 1e-10;
            for j in 0..d {
                pass &= (g.q[(i, j)] - cf.grad_q_a[(i, j)]).abs() <= 1e-10;
                pass &= (g.q[(d + i, j)] - cf.grad_q_a_prime[(i, j)]).abs() <= 1e-10;
            }
            pass &= (g.q[(2 * d, i)] - cf.grad_q_a_row[i]).abs() <= 1e-10;
        }
        pass &= (g.p[(2 * d, 2 * d)] - cf.grad_p[2 * d]).abs() <= 1e-10;
    }
    report(3, "gradient correctness", pass);
}

#[test]
fn criterion_4_invariant_set_consistency() {
    let mut rng = SeededRng::new(41);
    let rep = verify_invariant_set(1.0, -1.0, 0.0, 30, 4, 10_000, &mut rng).unwrap();
    let mut pass = rep.pass;

    // negative control: off-pattern P entry couples the update to the features
    let star = theta_star(1.0, -1.0, 0.0, 4, 30).unwrap();
    let mut p = star.layers[0].p.clone();
    p[(8, 0)] = 1.0;
    let mut rng = SeededRng::new(42);
    let control = invariant_set_report(&p, &star.layers[0].q, 30, 4, 0.9, 10_000, &mut rng).unwrap();
    pass &= !control.pass;
    report(4, "invariant-set consistency", pass);
}

#[test]
fn criterion_5_emergence_of_in_context_td() {
    let d = 4.0;
    let (pbr, p_oth, tr_l, tr_r, q_oth) = mean_stats(&TRAINED_L3, 4);
    let pass = tr_l <= -0.7 * d
        && tr_r >= 0.5 * d
        && p_oth <= 0.2
        && q_oth <= 0.2
        && pbr >= 0.9;
    println!(
        "  L=3 means: p_br {pbr:.3} p_others {p_oth:.3} tr_left {tr_l:.3} tr_right {tr_r:.3} q_others {q_oth:.3}"
    );
    report(5, "emergence of in-context TD", pass);
}

#[test]
fn criterion_6_single_layer_selects_one_layer_pattern() {
    let d = 4.0;
    let (pbr, _, tr_l, tr_r, _) = mean_stats(&TRAINED_L1, 4);
    let pass = tr_l <= -0.7 * d && tr_r.abs() <= 0.2 * d && pbr >= 0.9;
    println!("  L=1 means: p_br {pbr:.3} tr_left {tr_l:.3} tr_right {tr_r:.3}");
    report(6, "single-layer emergence", pass);
}

#[test]
fn criterion_7_msve_vs_context_demo() {
    let rows = demo_msve_vs_context(&DemoConfig::default()).unwrap();
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    let pass = last.mean_msve < first.mean_msve
        && last.mean_msve + last.std_err < first.mean_msve - first.std_err
        && last.mean_msve < 0.25 * first.mean_msve;
    report(7, "MSVE-vs-context demo", pass);
}

#[test]
fn criterion_8_metric_suite_sanity() {
    let cfg = emergence_cfg(3, 1);
    let mut pass = true;

    // self-comparison is exact
    let exact = td_baseline(0.3, cfg.l, cfg.d, cfg.n).unwrap();
    let mut rng = SeededRng::new(81);
    let mut task = gen_boyan(10, cfg.d, cfg.gamma, &mut rng).unwrap();
    let finite = task.as_finite().unwrap().clone();
    let traj = sample_trajectory(&mut task, cfg.n, &mut rng).unwrap();
    let prompt =
        build_prompt(&traj.phis[0..=cfg.n], &traj.rewards, cfg.gamma, &traj.phis[cfg.n]).unwrap();
    pass &= value_difference(&exact.params, &exact, &finite, &prompt).unwrap() <= 1e-18;
    pass &=
        (implicit_weight_similarity(&exact.params, &exact, &finite, &prompt).unwrap() - 1.0).abs()
            <= 1e-12;
    pass &= (sensitivity_similarity(&exact.params, &exact, &finite, &prompt).unwrap() - 1.0).abs()
        <= 1e-12;

    // trained models against the fitted TD baseline
    let alpha = fit_alpha_for_vtd(&cfg).unwrap();
    let baseline = td_baseline(alpha, cfg.l, cfg.d, cfg.n).unwrap();
    let trials = 50;
    let (mut vd_sum, mut iws_sum, mut ss_sum, mut scale_sum) = (0.0, 0.0, 0.0, 0.0);
    for (seed, out) in EMERGENCE_SEEDS.iter().zip(TRAINED_L3.iter()) {
        let mut rng = SeededRng::new(1000 + seed);
        for _ in 0..trials {
            let mut task = gen_boyan(10, cfg.d, cfg.gamma, &mut rng).unwrap();
            let finite = task.as_finite().unwrap().clone();
            let traj = sample_trajectory(&mut task, cfg.n, &mut rng).unwrap();
            let prompt =
                build_prompt(&traj.phis[0..=cfg.n], &traj.rewards, cfg.gamma, &traj.phis[cfg.n])
                    .unwrap();
            vd_sum += value_difference(&out.params, &baseline, &finite, &prompt).unwrap();
            iws_sum += implicit_weight_similarity(&out.params, &baseline, &finite, &prompt).unwrap();
            ss_sum += sensitivity_similarity(&out.params, &baseline, &finite, &prompt).unwrap();
            let v = true_value(&finite.mrp, cfg.gamma).unwrap();
            let d_p = stationary_distribution(&finite.mrp.p).unwrap();
            scale_sum += msve(&vec![0.0; v.len()], &v, &d_p).unwrap();
        }
    }
    let count = (EMERGENCE_SEEDS.len() * trials) as f64;
    let (vd, iws, ss, scale) =
        (vd_sum / count, iws_sum / count, ss_sum / count, scale_sum / count);
    println!("  trained vs TD(alpha={alpha:.3}): vd {vd:.4} iws {iws:.3} ss {ss:.3} scale {scale:.3}");
    pass &= iws >= 0.78 && ss >= 0.78 && vd <= 0.1 * scale;
    report(8, "metric suite sanity", pass);
}

#[test]
fn trained_models_are_deterministic() {
    // same config twice gives bitwise-identical parameters; underpins the
    // reproducibility criterion exercised end to end in the CLI tests
    let cfg = TrainConfig { k: 60, ..emergence_cfg(1, 9) };
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn forward_sanity_on_trained_model() {
    // trained 3-layer model evaluates finite values without blowup
    let out = &TRAINED_L3[0];
    let mut rng = SeededRng::new(90);
    let prompt = random_prompt(&mut rng, 4, 30);
    let y = forward(&prompt, &out.params).unwrap().output;
    assert!(y.is_finite());
}
