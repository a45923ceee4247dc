//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (written straight to stderr so it shows even when output is captured)
//! and then asserts.

use std::collections::HashMap;
use std::io::Write as _;
use std::sync::{Arc, Mutex, OnceLock};

use prior_core::autodiff::finite_diff::{central_difference, max_relative_error};
use prior_core::autodiff::{softmax, Parameters, Tape, Tensor, Var};
use prior_core::evaluation::RecoveryReport;
use prior_core::gridworld::{Action, GridConfig, StateEncoding};
use prior_core::proxy::{proxy_prior_loss, transform_dispreferred, ProxyLabeller};
use prior_core::reconstruction::{recon_prior_loss, ReconstructionModel};
use prior_core::reward_model::{bt_from_returns, ce_loss, OutputMode, RewardNet};
use prior_core::teacher::{oracle_label, Choice, PreferencePair, Trajectory};
use prior_core::trainer::{run_experiment, ExperimentConfig, Variant};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion} [{verdict}] {name}: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients against central differences.

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn random_walk(rng: &mut ChaCha8Rng, grid: &GridConfig, len: usize) -> Trajectory {
    let start = grid.observation(rng.gen_range(0..grid.state_count()));
    let acts: Vec<Action> = (0..len).map(|_| Action::from_index(rng.gen_range(0..4))).collect();
    Trajectory::from_actions(start, &acts, grid).unwrap()
}

/// Worst relative error over every parameter tensor of `params`, where
/// `loss` evaluates the scalar on a fresh tape from bound parameters.
fn param_gradcheck(params: &Parameters, loss: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let l = loss(&mut tape, &vars);
    tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().data().to_vec();
        let numeric = central_difference(params.get(i), FD_STEP, |p| {
            let mut probe = params.clone();
            *probe.get_mut(i) = p.clone();
            let mut t = Tape::new();
            let pv = probe.bind_frozen(&mut t);
            let l = loss(&mut t, &pv);
            t.value(l).item()
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

struct Instance {
    pair: PreferencePair,
    net: RewardNet,
    recon: ReconstructionModel,
    proxy: ProxyLabeller,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let grid = GridConfig::new(rng.gen_range(3..9)).unwrap();
    let encoding = if rng.gen_bool(0.5) {
        StateEncoding::Symbols
    } else {
        StateEncoding::Observations
    };
    let len = rng.gen_range(3..9);
    let choice = [Choice::First, Choice::Second, Choice::Tie][rng.gen_range(0..3)];
    let pair = PreferencePair::new(random_walk(&mut rng, &grid, len), random_walk(&mut rng, &grid, len), choice);
    let mode = if rng.gen_bool(0.5) {
        OutputMode::Standard
    } else {
        OutputMode::ForcedNegative
    };
    let net = RewardNet::new(grid, rng.gen_range(4..13), mode, &mut rng);
    let recon = ReconstructionModel::new(grid, encoding, rng.gen_range(4..13), len, &mut rng);
    let proxy = ProxyLabeller::new(grid, encoding, rng.gen_range(4..13), &mut rng);
    Instance {
        pair,
        net,
        recon,
        proxy,
    }
}

#[test]
fn criterion_1_gradient_fidelity() {
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut bump = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };
    for seed in 0..20 {
        let inst = instance(seed);
        let pair = &inst.pair;

        let net = &inst.net;
        bump(
            "reward MLP (cross-entropy)",
            param_gradcheck(net.params(), |t, v| ce_loss(t, net, v, pair).unwrap()),
        );

        let recon = &inst.recon;
        let sample = recon.sample(&pair.tau0).unwrap();
        bump(
            "reconstruction transformer (MSE)",
            param_gradcheck(recon.params(), |t, v| {
                let pass = recon.forward(t, v, &sample.inputs).unwrap();
                let target = t.constant(Tensor::matrix(1, sample.target.len(), sample.target.clone()).unwrap());
                let d = t.sub(pass.prediction, target).unwrap();
                let sq = t.mul(d, d).unwrap();
                t.mean(sq)
            }),
        );

        let proxy = &inst.proxy;
        let (x0, x1) = (proxy.encode(&pair.tau0), proxy.encode(&pair.tau1));
        let label = pair.preferred().unwrap_or(0);
        bump(
            "proxy labeller (cross-entropy)",
            param_gradcheck(proxy.params(), |t, v| {
                let a = t.constant(x0.clone());
                let b = t.constant(x1.clone());
                let logits = proxy.logits(t, v, a, b).unwrap();
                let lp = t.log_softmax(logits, 0).unwrap();
                let picked = t.slice_rows(lp, label, label + 1).unwrap();
                let s = t.sum(picked);
                t.scale(s, -1.0)
            }),
        );

        let prior = Tensor::vector(recon.attention_weights(&pair.tau0).unwrap().weights);
        let k = prior.len();
        bump(
            "reconstruction prior loss",
            param_gradcheck(net.params(), |t, v| {
                let r = net.step_rewards_on(t, v, &pair.tau0).unwrap();
                let head = t.slice_rows(r, 0, k).unwrap();
                let p = t.constant(prior.clone());
                recon_prior_loss(t, p, head).unwrap()
            }),
        );

        let importance = proxy.vanilla_grad(&pair.tau0, &pair.tau1).unwrap();
        bump(
            "proxy prior loss",
            param_gradcheck(net.params(), |t, v| {
                let r0 = net.step_rewards_on(t, v, &pair.tau0).unwrap();
                let r1 = net.step_rewards_on(t, v, &pair.tau1).unwrap();
                proxy_prior_loss(t, r0, r1, &importance).unwrap()
            }),
        );
    }
    let mut names: Vec<_> = worst.iter().collect();
    names.sort_by(|a, b| a.0.cmp(b.0));
    let pass = names.iter().all(|(_, &e)| e <= FD_TOL);
    let detail: Vec<String> = names.iter().map(|(n, e)| format!("{n} max rel err {e:.2e}")).collect();
    report(1, "gradient fidelity over 20 randomized instances", pass, &detail.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 2: invariants under property-based randomization.

fn cases() -> Config {
    Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    }
}

fn grid_walk() -> impl Strategy<Value = (usize, u64, usize)> {
    (2usize..10, any::<u64>(), 2usize..12)
}

fn check(name: &str, outcome: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Option<String> {
    match outcome {
        Ok(()) => None,
        Err(e) => Some(format!("{name}: {e}")),
    }
}

#[test]
fn criterion_2_invariant_suite() {
    let mut failures = Vec::new();
    let mut names = Vec::new();

    names.push("softmax simplex");
    failures.push(check(
        "softmax simplex",
        TestRunner::new(cases()).run(&proptest::collection::vec(-50.0..50.0f64, 1..30), |v| {
            let s = softmax(&v);
            prop_assert!(s.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            Ok(())
        }),
    ));

    names.push("attention simplex");
    failures.push(check(
        "attention simplex",
        TestRunner::new(cases()).run(&(grid_walk(), any::<bool>()), |((n, seed, len), symbols)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GridConfig::new(n).unwrap();
            let enc = if symbols {
                StateEncoding::Symbols
            } else {
                StateEncoding::Observations
            };
            let m = ReconstructionModel::new(g, enc, 8, len, &mut rng);
            let t = random_walk(&mut rng, &g, len);
            for row in m.attention_matrix(&t).unwrap() {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            Ok(())
        }),
    ));

    names.push("KL nonnegative");
    failures.push(check(
        "KL nonnegative",
        TestRunner::new(cases()).run(
            &(1usize..20).prop_flat_map(|k| {
                (
                    proptest::collection::vec(-10.0..10.0f64, k),
                    proptest::collection::vec(-10.0..10.0f64, k),
                )
            }),
            |(a, b)| {
                let mut tape = Tape::new();
                let p = tape.constant(Tensor::vector(softmax(&a)));
                let q = tape.constant(Tensor::vector(softmax(&b)));
                let kl = tape.kl_divergence(p, q).unwrap();
                prop_assert!(tape.value(kl).item() >= -1e-12);
                Ok(())
            },
        ),
    ));

    names.push("reward range");
    failures.push(check(
        "reward range",
        TestRunner::new(cases()).run(&(2usize..10, any::<u64>(), any::<bool>(), 1.0..20.0f64), |(n, seed, forced, scale)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GridConfig::new(n).unwrap();
            let mode = if forced {
                OutputMode::ForcedNegative
            } else {
                OutputMode::Standard
            };
            let mut net = RewardNet::new(g, 8, mode, &mut rng);
            for i in 0..net.params().len() {
                for v in net.params_mut().get_mut(i).data_mut() {
                    *v *= scale;
                }
            }
            let lo = -1.0;
            let hi = if forced { 0.0 } else { 1.0 };
            prop_assert!(net.reward_table().values().iter().all(|&r| (lo..=hi).contains(&r)));
            Ok(())
        }),
    ));

    names.push("dis-preferred transform");
    failures.push(check(
        "dis-preferred transform",
        TestRunner::new(cases()).run(&proptest::collection::vec(-10.0..10.0f64, 1..30), |g| {
            let once = transform_dispreferred(&g).unwrap();
            prop_assert!(once.iter().all(|&x| x <= 0.0));
            prop_assert_eq!(transform_dispreferred(&once).unwrap(), once);
            Ok(())
        }),
    ));

    names.push("Bradley-Terry antisymmetry");
    failures.push(check(
        "Bradley-Terry antisymmetry",
        TestRunner::new(cases()).run(&(-200.0..200.0f64, -200.0..200.0f64), |(a, b)| {
            let (p, q) = bt_from_returns(a, b);
            let (p2, _) = bt_from_returns(b, a);
            prop_assert!((p + p2 - 1.0).abs() < 1e-9);
            prop_assert!((p + q - 1.0).abs() < 1e-12);
            Ok(())
        }),
    ));

    names.push("oracle antisymmetry");
    failures.push(check(
        "oracle antisymmetry",
        TestRunner::new(cases()).run(&grid_walk(), |(n, seed, len)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GridConfig::new(n).unwrap();
            let a = random_walk(&mut rng, &g, len);
            let b = random_walk(&mut rng, &g, len);
            let ab = oracle_label(&a, &b, &g).unwrap();
            let ba = oracle_label(&b, &a, &g).unwrap();
            prop_assert_eq!(ab.y, [ba.y[1], ba.y[0]]);
            prop_assert_eq!(ab.tie, ba.tie);
            Ok(())
        }),
    ));

    let failed: Vec<String> = failures.into_iter().flatten().collect();
    let pass = failed.is_empty();
    let detail = if pass {
        format!("{} properties x 1000 cases: {}", names.len(), names.join(", "))
    } else {
        failed.join("; ")
    };
    report(2, "invariant suite", pass, &detail);
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Experiment criteria. Runs are cached so criteria sharing a configuration
// reuse the same five seeds.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct RunKey {
    variant: Variant,
    budget: usize,
    length: usize,
    forced_negative: bool,
    seed: u64,
}

type Cache = Mutex<HashMap<RunKey, Arc<OnceLock<RecoveryReport>>>>;

fn cache() -> &'static Cache {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    CACHE.get_or_init(Cache::default)
}

fn config(key: RunKey) -> ExperimentConfig {
    ExperimentConfig {
        variant: key.variant,
        query_budget: key.budget,
        query_length: key.length,
        forced_negative: key.forced_negative,
        seed: key.seed,
        ..ExperimentConfig::default()
    }
}

fn run(key: RunKey) -> RecoveryReport {
    let cell = cache().lock().unwrap().entry(key).or_default().clone();
    cell.get_or_init(|| run_experiment(&config(key)).expect("experiment failed").report)
        .clone()
}

fn runs(variant: Variant, budget: usize, length: usize, forced_negative: bool) -> Vec<RecoveryReport> {
    (0..SEEDS)
        .map(|seed| {
            run(RunKey {
                variant,
                budget,
                length,
                forced_negative,
                seed,
            })
        })
        .collect()
}

fn count(rs: &[RecoveryReport], f: impl Fn(&RecoveryReport) -> bool) -> usize {
    rs.iter().filter(|r| f(r)).count()
}

fn full_recovery(r: &RecoveryReport) -> bool {
    r.all_negative && r.spearman_vs_distance >= 0.8 && r.goal_reached
}

fn recovered(r: &RecoveryReport) -> bool {
    r.all_negative && r.spearman_vs_distance >= 0.8
}

/// Mean EPC, `None` if any run's EPC was undefined.
fn mean_epc(rs: &[RecoveryReport]) -> Option<f64> {
    let v: Option<Vec<f64>> = rs.iter().map(|r| r.epc).collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean_negativity(rs: &[RecoveryReport]) -> f64 {
    rs.iter().map(|r| r.negativity_fraction).sum::<f64>() / rs.len() as f64
}

fn summary(rs: &[RecoveryReport]) -> String {
    format!(
        "all_negative {}/{n}, spearman>=0.8 {}/{n}, goal {}/{n}, mean negativity {:.3}, mean EPC {}",
        count(rs, |r| r.all_negative),
        count(rs, |r| r.spearman_vs_distance >= 0.8),
        count(rs, |r| r.goal_reached),
        mean_negativity(rs),
        mean_epc(rs).map_or("undefined".into(), |e| format!("{e:.3}")),
        n = rs.len(),
    )
}

#[test]
fn criterion_3_query_budget() {
    let prior40 = runs(Variant::Prior, 40, 8, false);
    let pebble40 = runs(Variant::Pebble, 40, 8, false);
    let pebble96 = runs(Variant::Pebble, 96, 8, false);
    let a = count(&prior40, full_recovery) >= 4;
    let b = count(&pebble40, |r| !r.all_negative) >= 4;
    let c = count(&pebble96, full_recovery) >= 3;
    let pass = a && b && c;
    report(
        3,
        "query budget (8x8, L=8)",
        pass,
        &format!(
            "PRIOR@40 recovers {}/5 (need 4) [{}]; PEBBLE@40 not all-negative {}/5 (need 4) [{}]; PEBBLE@96 recovers {}/5 (need 3) [{}]",
            count(&prior40, full_recovery),
            summary(&prior40),
            count(&pebble40, |r| !r.all_negative),
            summary(&pebble40),
            count(&pebble96, full_recovery),
            summary(&pebble96),
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_query_length() {
    let mut parts = Vec::new();
    let mut pass = true;
    for variant in [Variant::Prior, Variant::Pebble] {
        let short = runs(variant, 40, 3, false);
        let ok = count(&short, |r| !recovered(r)) >= 4;
        pass &= ok;
        parts.push(format!(
            "{variant}@L=3 fails recovery {}/5 (need 4) [{}]",
            count(&short, |r| !recovered(r)),
            summary(&short)
        ));
    }
    for length in [8, 12] {
        let prior = runs(Variant::Prior, 40, length, false);
        let pebble = runs(Variant::Pebble, 40, length, false);
        let ok_prior = count(&prior, recovered) >= 4;
        let ok_pebble = count(&pebble, |r| !r.all_negative) >= 4;
        pass &= ok_prior && ok_pebble;
        parts.push(format!(
            "prior@L={length} recovers {}/5 (need 4) [{}]; pebble@L={length} not all-negative {}/5 (need 4) [{}]",
            count(&prior, recovered),
            summary(&prior),
            count(&pebble, |r| !r.all_negative),
            summary(&pebble)
        ));
    }
    report(4, "query length", pass, &parts.join("; "));
    assert!(pass);
}

#[test]
fn criterion_5_forced_negative() {
    let prior = runs(Variant::Prior, 40, 8, true);
    let pebble = runs(Variant::Pebble, 40, 8, true);
    let goals = count(&prior, |r| r.goal_reached) == prior.len() && count(&pebble, |r| r.goal_reached) == pebble.len();
    let (ep, eb) = (mean_epc(&prior), mean_epc(&pebble));
    let gap = match (ep, eb) {
        (Some(p), Some(b)) => p < b && b - p >= 0.1,
        _ => false,
    };
    let pass = goals && gap;
    report(
        5,
        "forced-negative EPC ordering",
        pass,
        &format!(
            "PRIOR [{}]; PEBBLE [{}]; need every run goal-reaching and EPC(PEBBLE) - EPC(PRIOR) >= 0.1",
            summary(&prior),
            summary(&pebble)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_symbol_ablation() {
    let prior = runs(Variant::Prior, 40, 8, false);
    let oprior = runs(Variant::Oprior, 40, 8, false);
    let goals = count(&oprior, |r| r.goal_reached) == oprior.len();
    let better_epc = matches!((mean_epc(&prior), mean_epc(&oprior)), (Some(p), Some(o)) if p < o);
    let better_neg = mean_negativity(&prior) > mean_negativity(&oprior);
    let pass = goals && (better_epc || better_neg);
    report(
        6,
        "symbols vs observations",
        pass,
        &format!("PRIOR [{}]; O-PRIOR [{}]", summary(&prior), summary(&oprior)),
    );
    assert!(pass);
}

#[test]
fn criterion_7_determinism() {
    let cfg = ExperimentConfig {
        seed: 7,
        ..ExperimentConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg).unwrap().write_to(d.path()).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let metrics_equal = read(&dirs[0], "metrics.jsonl") == read(&dirs[1], "metrics.jsonl");
    let ckpt_equal = read(&dirs[0], "checkpoints/reward_final.json") == read(&dirs[1], "checkpoints/reward_final.json");
    let pass = metrics_equal && ckpt_equal;
    report(
        7,
        "determinism",
        pass,
        &format!("metrics.jsonl identical: {metrics_equal}; final reward checkpoint identical: {ckpt_equal}"),
    );
    assert!(pass);
}
