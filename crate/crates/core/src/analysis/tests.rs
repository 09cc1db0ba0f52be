use super::*;
use crate::dataset::{estimate_behavior, generate_dataset};
use crate::learner::{epq_exact_iterate, PolicySchedule};
use crate::mdp::{random_mdp, QFunction};
use crate::penalty::Threshold;

fn instance(seed: u64) -> (Mdp, OfflineDataset, BehaviorEstimate) {
    let mdp = random_mdp(5, 3, seed).unwrap();
    let ds = generate_dataset(&mdp, &TabularPolicy::uniform(5, 3), 40, 30, seed).unwrap();
    let b = estimate_behavior(&ds, 5, 3).unwrap();
    (mdp, ds, b)
}

fn agent_with_q(b: &BehaviorEstimate, pi: &TabularPolicy, q: QFunction) -> TrainedAgent {
    TrainedAgent {
        target_q: q.clone(),
        q,
        policy: pi.clone(),
        behavior: b.clone(),
        history: Vec::new(),
        status: RunStatus::Converged { step: 0 },
        mode: Mode::EpqExact,
        alpha: 0.0,
        tau: 0.0,
    }
}

fn peaked(ns: usize) -> TabularPolicy {
    TabularPolicy::new(ns, 3, [0.8, 0.15, 0.05].repeat(ns)).unwrap()
}

#[test]
fn bias_of_the_oracle_is_zero_and_shifts_exactly() {
    let (mdp, _, b) = instance(1);
    let pi = peaked(5);
    let q = exact_q(&mdp, &pi).unwrap();
    let report = measure_bias(&agent_with_q(&b, &pi, q.clone()), &mdp, 2000, 3).unwrap();
    for s in &report.states {
        assert!(s.bias.abs() < 1e-10);
        let mc = s.mc_truth.unwrap();
        assert!((mc - s.truth).abs() < 5.0 * s.mc_stderr.unwrap() + report.mc_truncation);
    }

    let shifted = QFunction::from_values(5, 3, q.values().iter().map(|v| v + 0.75).collect()).unwrap();
    let report = measure_bias(&agent_with_q(&b, &pi, shifted), &mdp, 0, 0).unwrap();
    for s in &report.states {
        assert!((s.bias - 0.75).abs() < 1e-12);
        assert!(s.mc_truth.is_none());
    }
    let mean_sq = report.states.iter().map(|s| s.bias * s.bias).sum::<f64>() / report.states.len() as f64;
    assert!((report.squared_bias - mean_sq).abs() < 1e-12);
}

#[test]
fn closed_form_special_cases() {
    let (mdp, _, _) = instance(2);
    let pi = peaked(5);
    let zero = fixed_point_closed_form(&mdp, &pi, &[0.0; 5], 7.0).unwrap();
    let v = exact_v(&mdp, &pi).unwrap();
    for (a, b) in zero.values.iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
    for r in &zero.resolvent_row_sums {
        assert!((r - 1.0 / (1.0 - mdp.discount())).abs() < 1e-9);
    }
    assert!(zero.resolvent_min >= -1e-12);

    let single = Mdp::from_dense(1, 1, &[1.0], vec![1.0], 0.8, vec![1.0]).unwrap();
    let cf = fixed_point_closed_form(&single, &TabularPolicy::uniform(1, 1), &[0.3], 2.0).unwrap();
    assert!((cf.values[0] - (5.0 - 2.0 * 0.3 / 0.2)).abs() < 1e-12);
    assert!(fixed_point_closed_form(&single, &TabularPolicy::uniform(1, 1), &[0.3, 0.1], 2.0).is_err());
}

#[test]
fn iteration_matches_closed_form() {
    let (mdp, _, b) = instance(3);
    let pi = peaked(5);
    let penalty = PenaltyConfig { alpha: 1.5, ..PenaltyConfig::default() };
    let mut q = QFunction::zeros(5, 3);
    for _ in 0..10_000 {
        q = epq_exact_iterate(&q, &mdp, &pi, &b, &penalty).unwrap();
    }
    let delta = average_penalties(&pi, &b, true, penalty.tau(3)).unwrap();
    let cf = fixed_point_closed_form(&mdp, &pi, &delta, penalty.alpha).unwrap();
    for (a, b) in q.state_values(&pi).iter().zip(&cf.values) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn threshold_cases() {
    let (_, _, b) = instance(4);
    let pi = peaked(5);
    let penalty = PenaltyConfig::default();
    assert_eq!(alpha_threshold(&pi, &b, &penalty, true, &[0.0; 15]).unwrap(), AlphaThreshold::Finite(0.0));

    // Scalar oracle: one state, min Δ_CQL = 0.64 with π = (0.9, 0.1), β̂ = (0.5, 0.5).
    let b1 = BehaviorEstimate::from_counts(1, 2, vec![1, 1]).unwrap();
    let p1 = TabularPolicy::new(1, 2, vec![0.9, 0.1]).unwrap();
    let t = alpha_threshold(&p1, &b1, &penalty, false, &[0.1, 0.1]).unwrap();
    assert!((t.value() - 0.15625).abs() < 1e-12);
    assert!(t.admits(0.2) && !t.admits(0.1));

    let same = TabularPolicy::new(1, 2, vec![0.5, 0.5]).unwrap();
    assert_eq!(alpha_threshold(&same, &b1, &penalty, true, &[0.1, 0.0]).unwrap(), AlphaThreshold::Unbounded);
    assert!(alpha_threshold(&same, &b1, &penalty, true, &[-0.1, 0.0]).is_err());
}

fn fixed_cfg(pi: &TabularPolicy, alpha: f64) -> LearnerConfig {
    LearnerConfig {
        mode: Mode::EpqExact,
        policy: PolicySchedule::Fixed(pi.clone()),
        penalty: PenaltyConfig { alpha, threshold: Threshold::Absolute(0.0), ..PenaltyConfig::default() },
        ..LearnerConfig::default()
    }
}

#[test]
fn certificate_passes_with_positive_margins() {
    let (mdp, ds, _) = instance(5);
    let pi = peaked(5);
    let cert = verify_underestimation(&ds, &mdp, &fixed_cfg(&pi, 2.0), &[0.0; 15]).unwrap();
    assert_eq!(cert.pass, Some(true));
    assert!(cert.min_margin() > 0.0);
    assert_eq!(cert.delta, 0.0);
    assert!(cert.warning.is_none());

    let mut buf = Vec::new();
    write_certificate_csv(&cert, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with(&CERTIFICATE_COLUMNS.join(",")));
    assert!(text.lines().nth(1).unwrap().contains(",pass,"));
}

#[test]
fn margins_grow_with_alpha() {
    let (mdp, ds, _) = instance(6);
    let pi = peaked(5);
    let mut prev: Option<Vec<f64>> = None;
    for alpha in [0.0, 0.5, 2.0, 8.0] {
        let cert = verify_underestimation(&ds, &mdp, &fixed_cfg(&pi, alpha), &[0.0; 15]).unwrap();
        let m: Vec<f64> = cert.margins.iter().map(|m| m.margin).collect();
        if let Some(p) = &prev {
            assert!(m.iter().zip(p).all(|(a, b)| a >= &(b - 1e-9)));
        }
        prev = Some(m);
    }
}

#[test]
fn behavior_policy_has_zero_margins() {
    let (mdp, ds, b) = instance(7);
    let probs = (0..5).flat_map(|s| b.row(s).unwrap()).collect();
    let pi = TabularPolicy::new(5, 3, probs).unwrap();
    let cert = verify_underestimation(&ds, &mdp, &fixed_cfg(&pi, 10.0), &[0.0; 15]).unwrap();
    assert!(cert.margins.iter().all(|m| m.margin.abs() < 1e-6));
    // With ξ > 0 and Δ ≡ 0 the theorem offers nothing.
    let cert = verify_underestimation(&ds, &mdp, &fixed_cfg(&pi, 10.0), &[0.1; 15]).unwrap();
    assert_eq!(cert.pass, None);
    assert!(cert.warning.unwrap().contains("threshold"));
}

#[test]
fn sampled_modes_are_rejected_by_verify() {
    let (mdp, ds, _) = instance(8);
    let cfg = LearnerConfig { mode: Mode::CqlSampled, ..LearnerConfig::default() };
    assert!(verify_underestimation(&ds, &mdp, &cfg, &[0.0; 15]).is_err());
}

#[test]
fn bias_csv_layout() {
    let (mdp, _, b) = instance(9);
    let pi = peaked(5);
    let report = measure_bias(&agent_with_q(&b, &pi, exact_q(&mdp, &pi).unwrap()), &mdp, 0, 0).unwrap();
    let mut buf = Vec::new();
    write_bias_states_csv(&report, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), BIAS_STATE_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 1 + report.states.len());
    let mut buf = Vec::new();
    write_bias_summary_csv(&report, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
}

fn small_spec() -> ScenarioSpec {
    ScenarioSpec { angle_bins: 9, velocity_bins: 9, behavior_samples: 20_000, mc_rollouts: 0, ..ScenarioSpec::default() }
}

#[test]
fn scenario_policy_lives_on_the_histogram_support() {
    let case = ScenarioCase::build(Scenario::CaseC, &small_spec(), 1).unwrap();
    let na = case.mdp.n_actions();
    assert_eq!(na, 41);
    let row = case.policy.row(case.probe);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for a in 0..na {
        if !case.behavior.supports(case.probe, a) {
            assert_eq!(row[a], 0.0);
        }
    }
    // The policy peaks at zero torque.
    let peak = (0..na).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
    assert_eq!(peak, case.grid.zero_torque_action());
}

#[test]
fn scenario_without_penalty_is_unbiased() {
    let case = ScenarioCase::build(Scenario::CaseA, &small_spec(), 2).unwrap();
    for method in [Method::Cql, Method::Epq] {
        let r = case.evaluate(method, 0.0, &PenaltyConfig::default()).unwrap();
        assert!(r.bias.abs() < 1e-8, "{method:?}: {}", r.bias);
    }
}

#[test]
fn scenario_matches_closed_form() {
    let case = ScenarioCase::build(Scenario::CaseB, &small_spec(), 3).unwrap();
    let penalty = PenaltyConfig::default();
    let r = case.evaluate(Method::Cql, 5.0, &penalty).unwrap();
    let delta = average_penalties(&case.policy, &case.behavior, false, 0.0).unwrap();
    let cf = fixed_point_closed_form(&case.mdp, &case.policy, &delta, 5.0).unwrap();
    assert!((r.estimate - cf.values[case.probe]).abs() < 1e-6);
    assert!(r.tau_over_rho.is_none());
    assert!(r.tau.is_nan());
}

#[test]
fn scenario_csv_layout() {
    let case = ScenarioCase::build(Scenario::CaseA, &small_spec(), 4).unwrap();
    let penalty = PenaltyConfig::default();
    let results: Vec<ScenarioResult> =
        [1.0, 5.0].iter().map(|&a| case.evaluate(Method::Epq, a, &penalty).unwrap()).collect();
    let mut buf = Vec::new();
    write_scenario_csv(&results, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "alpha,tau,bias,squared_bias,stderr");
    assert!(lines.next().unwrap().starts_with("1,2,"));
    let mut buf = Vec::new();
    write_action_bias_csv(&results, &mut buf).unwrap();
    let n_supported = results[0].actions.len();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * n_supported);
}

#[test]
fn scenario_names_round_trip() {
    for s in Scenario::ALL {
        assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
    }
    assert!("case_d".parse::<Scenario>().is_err());
    assert_eq!("EPQ".parse::<Method>().unwrap(), Method::Epq);
}

#[test]
fn narrow_instance_has_one_data_action() {
    let inst = narrow_behavior_instance(1).unwrap();
    let b = estimate_behavior(&inst.dataset, 6, 11).unwrap();
    for s in b.visited_states() {
        for a in 0..11 {
            assert_eq!(b.supports(s, a), a == NARROW_DATA_ACTION);
        }
    }
    assert!(inst.mdp.rewards().iter().all(|r| (0.0..=1.0).contains(r)));
    assert!((inst.mdp.action_values()[NARROW_DATA_ACTION] - 0.4).abs() < 1e-12);
}
