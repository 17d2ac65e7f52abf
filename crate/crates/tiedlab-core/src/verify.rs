//! Seeded property suites over random legal layer instances: two-path and
//! expansion-oracle equivalence, degeneracy identities, gradient checks and
//! the exact counting identities. The CLI's verify command runs these; the
//! acceptance tests assert the same properties independently.

use crate::autograd::{gradcheck, LayerKind, GRADCHECK_TOL};
use crate::count::{conv_macs, conv_params, fc_params};
use crate::diff::{bitwise_eq, max_abs_diff, rel_diff};
use crate::ops::{
    conv2d, fully_connected, global_avg_pool, group_conv2d, relu_mat, sigmoid_mat, ConvSpec,
    ConvWeights,
};
use crate::rng::Rng;
use crate::tensor::Tensor4;
use crate::tied::{
    expand_tfc_to_fc, expand_tied_to_untied, expanded_spec, scale_channels, tbc_forward_direct,
    tbc_forward_fast, tfc_forward, tfc_forward_rows, tgc_forward, tied_se_forward, TfcWeights,
    TiedConvWeights, TiedSeSpec, TiedSeWeights,
};

/// Aggregate outcome of one named check over many seeded instances.
#[derive(Debug, Clone)]
pub struct SuiteCheck {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    pub max_err: f64,
    /// Reproduction string (seed and spec) of the first failing instance.
    pub first_failure: Option<String>,
}

impl SuiteCheck {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

fn run_instances(
    name: &str,
    instances: usize,
    base_seed: u64,
    mut f: impl FnMut(u64, &mut Rng) -> (bool, f64, String),
) -> SuiteCheck {
    let mut passed = 0;
    let mut max_err = 0.0f64;
    let mut first_failure = None;
    for i in 0..instances {
        let seed = base_seed.wrapping_add(i as u64);
        let mut rng = Rng::seeded(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(1));
        let (ok, err, detail) = f(seed, &mut rng);
        max_err = max_err.max(err);
        if ok {
            passed += 1;
        } else if first_failure.is_none() {
            first_failure = Some(format!("seed={seed} {detail}"));
        }
    }
    SuiteCheck {
        name: name.to_string(),
        passed,
        total: instances,
        max_err,
        first_failure,
    }
}

/// Random tied-block spec: B from `b_choices`, k from `k_choices`, small
/// channel multiples, stride-legal spatial extent.
pub fn sample_tbc_spec(rng: &mut Rng, b_choices: &[usize], k_choices: &[usize]) -> ConvSpec {
    let b = *rng.choose(b_choices);
    let k = *rng.choose(k_choices);
    let stride = *rng.choose(&[1usize, 2]);
    let pad = if k == 3 { *rng.choose(&[0usize, 1]) } else { 0 };
    let c_in = b * (1 + rng.below(3) as usize);
    let c_out = b * (1 + rng.below(3) as usize);
    ConvSpec::tied(c_in, c_out, k, stride, pad, b, rng.below(2) == 0)
}

/// Random tied-group spec with G a multiple of B.
pub fn sample_tgc_spec(rng: &mut Rng) -> ConvSpec {
    let b = *rng.choose(&[1usize, 2, 4]);
    let g = b * (1 + rng.below(2) as usize);
    let k = *rng.choose(&[1usize, 3]);
    let stride = *rng.choose(&[1usize, 2]);
    let pad = if k == 3 { *rng.choose(&[0usize, 1]) } else { 0 };
    let unit = g.max(b);
    let c_in = unit * (1 + rng.below(3) as usize);
    let c_out = unit * (1 + rng.below(3) as usize);
    ConvSpec::tied_grouped(c_in, c_out, k, stride, pad, g, b, rng.below(2) == 0)
}

/// Input sized so the spec's output extent is a small positive integer.
pub fn sample_input(rng: &mut Rng, spec: &ConvSpec) -> Tensor4 {
    let n = 1 + rng.below(2) as usize;
    let oh = 2 + rng.below(3) as usize;
    let ow = 2 + rng.below(3) as usize;
    let h = (oh - 1) * spec.stride + spec.k - 2 * spec.pad;
    let w = (ow - 1) * spec.stride + spec.k - 2 * spec.pad;
    Tensor4::random(n, spec.c_in, h, w, 1.0, rng)
}

fn random_tied_weights(spec: &ConvSpec, rng: &mut Rng) -> TiedConvWeights {
    let mut wts = TiedConvWeights::init(spec, rng).expect("legal spec");
    if let Some(bias) = wts.bias.as_mut() {
        for v in bias.iter_mut() {
            *v = rng.next_f64();
        }
    }
    wts
}

/// Degeneracy identities: tbc(B=1) == conv2d, tgc(B=1) == group_conv2d,
/// tgc(G=B) == tbc(B), group_conv2d(G=1) == conv2d — all bitwise.
pub fn degeneracy_check(instances: usize, base_seed: u64) -> Vec<SuiteCheck> {
    let tbc1 = run_instances("tbc_b1_is_conv2d", instances, base_seed, |_, rng| {
        let mut spec = sample_tbc_spec(rng, &[1], &[1, 3]);
        spec.c_in = 1 + rng.below(6) as usize;
        spec.c_out = 1 + rng.below(6) as usize;
        let wts = random_tied_weights(&spec, rng);
        let x = sample_input(rng, &spec);
        let tied = tbc_forward_direct(&x, &spec, &wts).unwrap();
        let conv_spec = ConvSpec { blocks: 1, ..spec };
        let plain = conv2d(
            &x,
            &conv_spec,
            &ConvWeights {
                w: wts.w.clone(),
                bias: wts.bias.clone(),
            },
        )
        .unwrap();
        let ok = bitwise_eq(tied.data(), plain.data());
        (
            ok,
            max_abs_diff(tied.data(), plain.data()),
            format!("{spec:?}"),
        )
    });
    let tgc_b1 = run_instances("tgc_b1_is_group_conv2d", instances, base_seed, |_, rng| {
        let mut spec = sample_tgc_spec(rng);
        spec.blocks = 1;
        let wts = random_tied_weights(&spec, rng);
        let x = sample_input(rng, &spec);
        let tied = tgc_forward(&x, &spec, &wts).unwrap();
        let grouped = group_conv2d(
            &x,
            &spec,
            &ConvWeights {
                w: wts.w.clone(),
                bias: wts.bias.clone(),
            },
        )
        .unwrap();
        let ok = bitwise_eq(tied.data(), grouped.data());
        (
            ok,
            max_abs_diff(tied.data(), grouped.data()),
            format!("{spec:?}"),
        )
    });
    let tgc_gb = run_instances("tgc_g_eq_b_is_tbc", instances, base_seed, |_, rng| {
        let b = *rng.choose(&[2usize, 4]);
        let k = *rng.choose(&[1usize, 3]);
        let c_in = b * (1 + rng.below(3) as usize);
        let c_out = b * (1 + rng.below(3) as usize);
        let tgc_spec = ConvSpec::tied_grouped(c_in, c_out, k, 1, k / 2, b, b, rng.below(2) == 0);
        let wts = random_tied_weights(&tgc_spec, rng);
        let x = sample_input(rng, &tgc_spec);
        let a = tgc_forward(&x, &tgc_spec, &wts).unwrap();
        let tbc_spec = ConvSpec::tied(c_in, c_out, k, 1, k / 2, b, tgc_spec.has_bias);
        let bb = tbc_forward_direct(&x, &tbc_spec, &wts).unwrap();
        let ok = bitwise_eq(a.data(), bb.data());
        (
            ok,
            max_abs_diff(a.data(), bb.data()),
            format!("{tgc_spec:?}"),
        )
    });
    let gc1 = run_instances(
        "group_conv2d_g1_is_conv2d",
        instances,
        base_seed,
        |_, rng| {
            let c_in = 1 + rng.below(6) as usize;
            let c_out = 1 + rng.below(6) as usize;
            let k = *rng.choose(&[1usize, 3]);
            let spec = ConvSpec::grouped(c_in, c_out, k, 1, k / 2, 1, rng.below(2) == 0);
            let wts = random_tied_weights(&spec, rng);
            let cw = ConvWeights {
                w: wts.w.clone(),
                bias: wts.bias.clone(),
            };
            let x = sample_input(rng, &spec);
            let a = group_conv2d(&x, &spec, &cw).unwrap();
            let std_spec = ConvSpec { groups: 1, ..spec };
            let b = conv2d(&x, &std_spec, &cw).unwrap();
            let ok = bitwise_eq(a.data(), b.data());
            (ok, max_abs_diff(a.data(), b.data()), format!("{spec:?}"))
        },
    );
    vec![tbc1, tgc_b1, tgc_gb, gc1]
}

/// Two-path identity: the folded fast path equals the per-block path bitwise
/// (B in {2,4,8}, k in {1,3}).
pub fn two_path_check(instances: usize, base_seed: u64) -> SuiteCheck {
    run_instances("tbc_fast_is_direct", instances, base_seed, |_, rng| {
        let spec = sample_tbc_spec(rng, &[2, 4, 8], &[1, 3]);
        let wts = random_tied_weights(&spec, rng);
        let x = sample_input(rng, &spec);
        let direct = tbc_forward_direct(&x, &spec, &wts).unwrap();
        let fast = tbc_forward_fast(&x, &spec, &wts).unwrap();
        let ok = bitwise_eq(direct.data(), fast.data());
        (
            ok,
            max_abs_diff(direct.data(), fast.data()),
            format!("{spec:?}"),
        )
    })
}

/// Expansion oracles: every tied layer equals its untied block-diagonal or
/// bank-replicated expansion within 1e-12.
pub fn expansion_check(instances: usize, base_seed: u64) -> Vec<SuiteCheck> {
    let tbc = run_instances("tbc_matches_expansion", instances, base_seed, |_, rng| {
        let spec = sample_tbc_spec(rng, &[1, 2, 4], &[1, 3]);
        let wts = random_tied_weights(&spec, rng);
        let x = sample_input(rng, &spec);
        let tied = tbc_forward_direct(&x, &spec, &wts).unwrap();
        let expanded = expand_tied_to_untied(&spec, &wts).unwrap();
        let untied = conv2d(&x, &expanded_spec(&spec), &expanded).unwrap();
        let err = rel_diff(tied.data(), untied.data());
        (err <= 1e-12, err, format!("{spec:?}"))
    });
    let tgc = run_instances("tgc_matches_expansion", instances, base_seed, |_, rng| {
        let spec = sample_tgc_spec(rng);
        let wts = random_tied_weights(&spec, rng);
        let x = sample_input(rng, &spec);
        let tied = tgc_forward(&x, &spec, &wts).unwrap();
        let expanded = expand_tied_to_untied(&spec, &wts).unwrap();
        let untied = group_conv2d(&x, &expanded_spec(&spec), &expanded).unwrap();
        let err = rel_diff(tied.data(), untied.data());
        (err <= 1e-12, err, format!("{spec:?}"))
    });
    let tfc = run_instances("tfc_matches_expansion", instances, base_seed, |_, rng| {
        let b = *rng.choose(&[1usize, 2, 4]);
        let c_in = b * (1 + rng.below(4) as usize);
        let c_out = b * (1 + rng.below(4) as usize);
        let wts = TfcWeights::init(c_in, c_out, b, rng.below(2) == 0, rng).unwrap();
        let x: Vec<f64> = (0..c_in).map(|_| rng.next_f64()).collect();
        let tied = tfc_forward(&x, b, &wts).unwrap();
        let (w, bias) = expand_tfc_to_fc(b, &wts).unwrap();
        let untied = fully_connected(&x, &w, bias.as_deref()).unwrap();
        let err = rel_diff(&tied, &untied);
        (
            err <= 1e-12,
            err,
            format!("tfc c_in={c_in} c_out={c_out} b={b}"),
        )
    });
    vec![tbc, tgc, tfc]
}

/// TiedSE equals the explicit pool→tfc→relu→tfc→sigmoid→scale composition
/// bitwise.
pub fn tied_se_check(instances: usize, base_seed: u64) -> SuiteCheck {
    run_instances(
        "tied_se_matches_composition",
        instances,
        base_seed,
        |_, rng| {
            let b = *rng.choose(&[1usize, 2]);
            let r = *rng.choose(&[2usize, 4]);
            let c = r * b * (1 + rng.below(3) as usize);
            let spec = TiedSeSpec::new(c, r, b, rng.below(2) == 0);
            let wts = TiedSeWeights::init(&spec, rng).unwrap();
            let n = 1 + rng.below(2) as usize;
            let x = Tensor4::random(n, c, 4, 4, 1.0, rng);
            let y = tied_se_forward(&x, &spec, &wts).unwrap();
            let z = global_avg_pool(&x);
            let h = relu_mat(&tfc_forward_rows(&z, b, &wts.reduce).unwrap());
            let s = sigmoid_mat(&tfc_forward_rows(&h, b, &wts.expand).unwrap());
            let oracle = scale_channels(&x, &s);
            let ok = bitwise_eq(y.data(), oracle.data());
            (
                ok,
                max_abs_diff(y.data(), oracle.data()),
                format!("{spec:?}"),
            )
        },
    )
}

/// Full equivalence suite.
pub fn equiv_suite(instances: usize, base_seed: u64) -> Vec<SuiteCheck> {
    let mut checks = vec![two_path_check(instances, base_seed)];
    checks.extend(expansion_check(instances, base_seed));
    checks.extend(degeneracy_check(instances, base_seed));
    checks.push(tied_se_check(instances, base_seed));
    checks
}

/// Gradient-check suite: one check per layer kind, `instances` seeded
/// instances each.
pub fn gradcheck_suite(instances: usize, base_seed: u64) -> Vec<SuiteCheck> {
    LayerKind::ALL
        .iter()
        .map(|&kind| {
            let mut passed = 0;
            let mut max_err = 0.0f64;
            let mut first_failure = None;
            for i in 0..instances {
                let seed = base_seed.wrapping_add(i as u64);
                let reports = gradcheck(kind, seed);
                let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
                max_err = max_err.max(worst);
                if reports.iter().all(|r| r.pass) {
                    passed += 1;
                } else if first_failure.is_none() {
                    let bad = reports.iter().find(|r| !r.pass).unwrap();
                    first_failure = Some(format!(
                        "seed={seed} param={} err={:.3e} tol={GRADCHECK_TOL:.0e}",
                        bad.param, bad.max_rel_err
                    ));
                }
            }
            SuiteCheck {
                name: format!("gradcheck_{}", kind.name()),
                passed,
                total: instances,
                max_err,
                first_failure,
            }
        })
        .collect()
}

/// Exact integer counting identities plus the fixed worked examples.
pub fn counts_suite(instances: usize, base_seed: u64) -> Vec<SuiteCheck> {
    let identities = run_instances("count_identities", instances, base_seed, |_, rng| {
        let b = *rng.choose(&[1usize, 2, 4, 8]);
        let g = b * (1 + rng.below(2) as usize);
        let k = *rng.choose(&[1usize, 3]);
        let unit = g.max(b);
        let ci = unit * (1 + rng.below(4) as usize);
        let co = unit * (1 + rng.below(4) as usize);
        let conv = ConvSpec::standard(ci, co, k, 1, k / 2, false);
        let tbc = ConvSpec::tied(ci, co, k, 1, k / 2, b, false);
        let gc = ConvSpec::grouped(ci, co, k, 1, k / 2, g, false);
        let tgc = ConvSpec::tied_grouped(ci, co, k, 1, k / 2, g, b, false);
        let p = conv_params(&conv).unwrap();
        let m = conv_macs(&conv, 2, 8, 8).unwrap();
        let ok = conv_params(&tbc).unwrap() * (b * b) as u64 == p
            && conv_params(&gc).unwrap() * g as u64 == p
            && conv_params(&tgc).unwrap() * (g * b) as u64 == p
            && conv_macs(&tbc, 2, 8, 8).unwrap() * b as u64 == m
            && conv_macs(&gc, 2, 8, 8).unwrap() * g as u64 == m
            && fc_params(ci, co, b, false).unwrap() * (b * b) as u64
                == fc_params(ci, co, 1, false).unwrap();
        (ok, 0.0, format!("ci={ci} co={co} k={k} g={g} b={b}"))
    });
    let fixed = run_instances("count_fixed_examples", 1, base_seed, |_, _| {
        let ok = conv_params(&ConvSpec::standard(64, 64, 3, 1, 1, false)).unwrap() == 36_864
            && conv_params(&ConvSpec::tied(64, 64, 3, 1, 1, 2, false)).unwrap() == 9_216
            && conv_params(&ConvSpec::tied_grouped(64, 64, 3, 1, 1, 4, 2, false)).unwrap() == 4_608
            && conv_params(&ConvSpec::grouped(64, 64, 3, 1, 1, 4, false)).unwrap() == 9_216
            && conv_macs(&ConvSpec::standard(64, 64, 3, 1, 1, false), 1, 56, 56).unwrap()
                == 115_605_504
            && conv_macs(&ConvSpec::tied(64, 64, 3, 1, 1, 2, false), 1, 56, 56).unwrap()
                == 57_802_752
            && conv_macs(&ConvSpec::grouped(64, 64, 3, 1, 1, 4, false), 1, 56, 56).unwrap()
                == 28_901_376;
        (ok, 0.0, "fixed worked examples".to_string())
    });
    vec![identities, fixed]
}
