//! Acceptance battery: every release-gating property of the laboratory,
//! one test per criterion, each printing a single pass/fail verdict line.
//!
//! The checks are oracle-backed: worked numbers are recomputed inline from
//! first principles, randomized identities run against closed-form
//! solutions, and the stochastic trainer is compared with exact
//! enumeration-based gradients and stationary distributions.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use sage_lab::derive_seed;
use sage_lab::env::{make_branch_explore_env, make_rare_mode_env, RareModeSpec, TokenTreeEnvironment};
use sage_lab::guide::GuideSpec;
use sage_lab::metrics::{evaluate_policy, pass_at_k};
use sage_lab::objectives::{
    pseudo_kl_decompose, pseudo_kl_exact, stationary_forward_kl, stationary_reverse_kl,
    stationary_sage, AnchorWeights,
};
use sage_lab::policy::{TabularPolicy, TrajectoryDistribution};
use sage_lab::runner::{
    preservation_env_spec, preservation_trainer_config, PRESERVATION_EPSILON,
};
use sage_lab::theory::{
    check_expansion_condition, instance_stream, random_instance, random_offtarget_instance,
    run_toy_example,
};
use sage_lab::trainer::{
    exact_policy_gradient, grpo_step, train, KlMode, TrainState, TrainerConfig,
};

/// Print the verdict line and fail the test on a false condition.
fn conclude(num: u32, name: &str, started: Instant, budget: Duration, ok: bool, detail: &str) {
    let elapsed = started.elapsed();
    let in_time = elapsed <= budget;
    let verdict = if ok && in_time { "pass" } else { "fail" };
    println!("criterion {num:02} {name}: {verdict} [{elapsed:.2?}]");
    assert!(ok, "criterion {num:02} {name}: {detail}");
    assert!(
        in_time,
        "criterion {num:02} {name}: took {elapsed:?}, budget {budget:?}"
    );
}

fn base_trainer(kl_mode: KlMode, guide: GuideSpec, steps: u64, seed: u64) -> TrainerConfig {
    TrainerConfig {
        beta: 0.05,
        group_size: 8,
        steps,
        learning_rate: 0.5,
        clip_low: 0.2,
        clip_high: 0.2,
        kl_mode,
        guide,
        adv_std_floor: 1e-8,
        normalize_advantages: true,
        seed,
    }
}

fn two_traj_env() -> (TokenTreeEnvironment, TabularPolicy) {
    let env = TokenTreeEnvironment::new(2, 1, vec![vec![0]]).unwrap();
    let mut reference = TabularPolicy::uniform(&env);
    reference.logits_mut()[0] = vec![0.4f64.ln(), 0.6f64.ln()];
    (env, reference)
}

#[test]
fn criterion_01_worked_two_trajectory_example() {
    let t0 = Instant::now();
    let (report, _trace) = run_toy_example().unwrap();

    // Inline oracle, recomputed from scratch: guide factor 1 + 30 * (5 - 1)
    // on the rare branch point, 1 everywhere else; both completions valid,
    // so the exponential tilt cancels and the shaped probability is the
    // guide-reweighted reference.
    let rare = 1e-6;
    let q_star_oracle = 1.0 + 30.0 * (5.0 - 1.0);
    let eq_oracle = (1.0 - rare) * 1.0 + rare * q_star_oracle;
    let threshold_oracle = 1e-4 / rare * eq_oracle;
    let prob_oracle = q_star_oracle * rare / eq_oracle;

    let mut ok = true;
    let mut detail = String::new();
    let mut check = |label: &str, cond: bool| {
        if !cond {
            ok = false;
            detail.push_str(label);
            detail.push(' ');
        }
    };
    check("q_star_exact", report.q_star == 121.0 && report.q_star == q_star_oracle);
    check("expectation_q_exact", (report.expectation_q - 1.00012).abs() < 1e-12);
    check(
        "threshold",
        (report.rhs_threshold - 100.012).abs() / 100.012 < 1e-7
            && (report.rhs_threshold - threshold_oracle).abs() / threshold_oracle < 1e-12,
    );
    check("condition", report.condition_holds);
    check(
        "shaped_prob",
        (report.sage_prob_star - prob_oracle).abs() / prob_oracle < 1e-7
            && (report.sage_prob_star - 1.2099e-4).abs() / 1.2099e-4 < 1e-4,
    );
    check("membership", report.sage_prob_star > 1e-4 && report.membership);
    conclude(
        1,
        "worked two-trajectory example",
        t0,
        Duration::from_secs(1),
        ok,
        &format!("failed checks: {detail}; report: {report:?}"),
    );
}

#[test]
fn criterion_02_constant_guide_reduction() {
    let t0 = Instant::now();
    let mut rng = instance_stream(21);
    let mut worst = 0.0f64;
    for _ in 0..150 {
        let inst = random_instance(&mut rng);
        let ref_dist = inst.ref_dist();
        let unit = stationary_sage(
            &ref_dist,
            &inst.rewards,
            inst.beta,
            &vec![1.0; inst.rewards.len()],
        )
        .unwrap();
        let plain = stationary_reverse_kl(&ref_dist, &inst.rewards, inst.beta).unwrap();
        for (a, b) in unit.dist.probs.iter().zip(&plain.dist.probs) {
            worst = worst.max((a - b).abs());
        }
    }
    let closed_form_ok = worst < 1e-12;

    // Trainer-level reduction: with a constant guide the shaped mode must
    // replay the plain reverse-KL run bit for bit, rng stream included.
    let (env, reference) = two_traj_env();
    let cfg_r = base_trainer(KlMode::Reverse, GuideSpec::constant(), 50, 11);
    let cfg_s = base_trainer(KlMode::Sage, GuideSpec::constant(), 50, 11);
    let (log_r, pol_r) = train(&cfg_r, &env, &reference, None).unwrap();
    let (log_s, pol_s) = train(&cfg_s, &env, &reference, None).unwrap();
    let mut bitwise_ok = log_r == log_s;
    for (a, b) in pol_r.logits().iter().zip(pol_s.logits()) {
        for (&x, &y) in a.iter().zip(b) {
            bitwise_ok &= x.to_bits() == y.to_bits();
        }
    }
    conclude(
        2,
        "constant-guide reduction",
        t0,
        Duration::from_secs(30),
        closed_form_ok && bitwise_ok,
        &format!("worst closed-form residual {worst:e}, bitwise match {bitwise_ok}"),
    );
}

#[test]
fn criterion_03_penalty_decomposition() {
    let t0 = Instant::now();
    let mut rng = instance_stream(33);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let ref_dist = inst.ref_dist();
        let shaped =
            stationary_sage(&ref_dist, &inst.rewards, inst.beta, &inst.q_values).unwrap();
        let log_q: Vec<f64> = inst.q_values.iter().map(|q| q.ln()).collect();
        let (kl_part, bonus_part) =
            pseudo_kl_decompose(&shaped.dist, &ref_dist, &log_q).unwrap();
        let anchor = AnchorWeights::from_guide_and_ref(&inst.q_values, &ref_dist).unwrap();
        let direct = pseudo_kl_exact(&shaped.dist, &anchor).unwrap();
        worst = worst.max((kl_part - bonus_part - direct).abs());
    }
    conclude(
        3,
        "penalty decomposition",
        t0,
        Duration::from_secs(10),
        worst < 1e-10,
        &format!("worst residual {worst:e}"),
    );
}

#[test]
fn criterion_04_expansion_condition() {
    let t0 = Instant::now();
    let mut rng = instance_stream(7);
    let mut fired = 0usize;
    let mut violations = 0usize;
    let mut worst_identity = 0.0f64;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let report = check_expansion_condition(
            &inst.ref_dist(),
            &inst.rewards,
            inst.beta,
            &inst.q_values,
            inst.y_star,
            inst.epsilon,
        )
        .unwrap();
        worst_identity = worst_identity.max(report.identity_residual);
        if report.condition_holds {
            fired += 1;
            if !report.membership {
                violations += 1;
            }
        }
    }
    conclude(
        4,
        "expansion condition",
        t0,
        Duration::from_secs(60),
        violations == 0 && fired > 0 && worst_identity < 1e-10,
        &format!(
            "violations {violations}, fired {fired}, worst identity residual {worst_identity:e}"
        ),
    );
}

#[test]
fn criterion_05_forward_kl_solver() {
    let t0 = Instant::now();
    let mut rng = instance_stream(55);
    let mut worst_residual = 0.0f64;
    let mut lambda_ok = true;
    for _ in 0..500 {
        let inst = random_instance(&mut rng);
        let ref_dist = inst.ref_dist();
        let sol = stationary_forward_kl(&ref_dist, &inst.rewards, inst.beta).unwrap();
        let lambda = sol.lambda.unwrap();
        let r_max = inst.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lambda_ok &= lambda > r_max;
        // Independent normalization check: the unnormalized closed form
        // must already sum to one.
        let mass: f64 = ref_dist
            .probs
            .iter()
            .zip(&inst.rewards)
            .map(|(&p, &r)| inst.beta * p / (lambda - r))
            .sum();
        worst_residual = worst_residual.max((mass - 1.0).abs());
    }

    // Worked two-outcome case with a quadratic-root oracle: uniform
    // reference, rewards (1, 0), beta = 1 gives
    // 0.5/(lambda - 1) + 0.5/lambda = 1, i.e. lambda^2 - 2 lambda + 0.5 = 0.
    let ref_dist = TrajectoryDistribution::normalized(vec![0.5, 0.5]);
    let sol = stationary_forward_kl(&ref_dist, &[1.0, 0.0], 1.0).unwrap();
    let lambda_oracle = (2.0 + (4.0f64 - 2.0).sqrt()) / 2.0;
    let worked_ok = (sol.lambda.unwrap() - lambda_oracle).abs() < 1e-9;

    conclude(
        5,
        "forward-KL solver",
        t0,
        Duration::from_secs(10),
        worst_residual < 1e-10 && lambda_ok && worked_ok,
        &format!(
            "worst normalization residual {worst_residual:e}, lambda bound {lambda_ok}, \
             worked case {worked_ok} (got {:?}, want {lambda_oracle})",
            sol.lambda
        ),
    );
}

#[test]
fn criterion_06_offtarget_mass_comparison() {
    let t0 = Instant::now();
    let mut rng = instance_stream(8);
    let mut separated = 0usize;
    let mut sep_violations = 0usize;
    let mut qcond_violations = 0usize;
    for _ in 0..500 {
        let inst = random_offtarget_instance(&mut rng);
        let report = sage_lab::objectives::offtarget_reweight(
            &inst.ref_dist(),
            &inst.rewards,
            inst.beta,
            &inst.q_values,
        )
        .unwrap();
        if report.degenerate {
            continue;
        }
        if report.qcond_holds && !report.separation_holds {
            qcond_violations += 1;
        }
        if report.separation_holds {
            separated += 1;
            if report.sage_offmass >= report.fkl_offmass {
                sep_violations += 1;
            }
        }
    }
    conclude(
        6,
        "off-target mass comparison",
        t0,
        Duration::from_secs(30),
        sep_violations == 0 && qcond_violations == 0 && separated > 0,
        &format!(
            "separation violations {sep_violations}, q-condition violations {qcond_violations}, \
             separated instances {separated}"
        ),
    );
}

#[test]
fn criterion_07_pass_at_k_estimator() {
    let t0 = Instant::now();

    // Exhaustive oracle: enumerate every size-k subset of n graded samples
    // (the first c correct) and average the any-correct indicator.
    let mut exhaustive_ok = true;
    for n in 1..=12u64 {
        for c in 0..=n {
            for k in 1..=n {
                let mut hits = 0u64;
                let mut total = 0u64;
                for mask in 0u32..(1 << n) {
                    if u64::from(mask.count_ones()) != k {
                        continue;
                    }
                    total += 1;
                    if c > 0 && (mask & ((1u32 << c) - 1)) != 0 {
                        hits += 1;
                    }
                }
                let oracle = hits as f64 / total as f64;
                let got = pass_at_k(n, c, k).unwrap();
                exhaustive_ok &= (got - oracle).abs() < 1e-12;
            }
        }
    }

    // Monotone in k for every feasible (n, c) up to n = 64.
    let mut monotone_ok = true;
    for n in 1..=64u64 {
        for c in 0..=n {
            let mut prev = 0.0;
            for k in 1..=n {
                let v = pass_at_k(n, c, k).unwrap();
                monotone_ok &= v >= prev - 1e-15;
                prev = v;
            }
        }
    }

    // Monte Carlo consistency on an enumerable policy: grade iid samples
    // whose correctness probability is known in closed form and compare the
    // estimator's mean against 1 - (1 - p)^k within three standard errors.
    let env = TokenTreeEnvironment::new(2, 1, vec![vec![0]]).unwrap();
    let mut policy = TabularPolicy::uniform(&env);
    policy.logits_mut()[0] = vec![0.37f64.ln(), 0.63f64.ln()];
    let p_correct = 0.37f64;
    let (n, trials) = (50u64, 2000usize);
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(7, 70));
    let mut mc_ok = true;
    for k in [1u64, 5, 10] {
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for i in 0..trials {
            let mut correct = 0;
            for _ in 0..n {
                let s = policy.sample_trajectory(&env, &mut rng);
                if env.is_valid(&s.tokens) {
                    correct += 1;
                }
            }
            let est = pass_at_k(n, correct, k).unwrap();
            let delta = est - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (est - mean);
        }
        let se = (m2 / (trials as f64 * (trials - 1) as f64)).sqrt();
        let truth = 1.0 - (1.0 - p_correct).powi(k as i32);
        mc_ok &= (mean - truth).abs() < 3.0 * se + 1e-12;
    }

    conclude(
        7,
        "pass@k estimator",
        t0,
        Duration::from_secs(30),
        exhaustive_ok && monotone_ok && mc_ok,
        &format!("exhaustive {exhaustive_ok}, monotone {monotone_ok}, monte carlo {mc_ok}"),
    );
}

#[test]
fn criterion_08_gradient_correctness() {
    let t0 = Instant::now();

    // Central finite differences against the exact enumeration gradient for
    // every divergence mode on a randomized depth-2 instance.
    use rand::Rng;
    let mut rng = ChaCha12Rng::seed_from_u64(19);
    let mut fd_ok = true;
    for kl_mode in [KlMode::None, KlMode::Reverse, KlMode::Sage, KlMode::Forward] {
        let env = TokenTreeEnvironment::new(2, 2, vec![vec![0, 1], vec![1, 0]]).unwrap();
        let table: Vec<Vec<f64>> = (0..env.num_contexts())
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ref_table: Vec<Vec<f64>> = (0..env.num_contexts())
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let policy = TabularPolicy::from_logits(&env, table).unwrap();
        let reference = TabularPolicy::from_logits(&env, ref_table).unwrap();
        let q: Vec<f64> = (0..env.num_trajectories())
            .map(|_| rng.gen_range(0.5..4.0))
            .collect();
        let beta = 0.3;

        let objective = |p: &TabularPolicy| -> f64 {
            let dist = p.exact_distribution(&env).unwrap();
            let rewards = env.reward_vector();
            let er: f64 = dist.probs.iter().zip(&rewards).map(|(&a, &r)| a * r).sum();
            let ref_dist = reference.exact_distribution(&env).unwrap();
            let div = match kl_mode {
                KlMode::None => 0.0,
                KlMode::Reverse => {
                    pseudo_kl_exact(&dist, &AnchorWeights(ref_dist.probs.clone())).unwrap()
                }
                KlMode::Sage => pseudo_kl_exact(
                    &dist,
                    &AnchorWeights::from_guide_and_ref(&q, &ref_dist).unwrap(),
                )
                .unwrap(),
                KlMode::Forward => {
                    pseudo_kl_exact(&ref_dist, &AnchorWeights(dist.probs.clone())).unwrap()
                }
            };
            er - beta * div
        };

        let grad = exact_policy_gradient(&policy, &env, &reference, beta, kl_mode, &q).unwrap();
        let h = 1e-5;
        for c in 0..env.num_contexts() {
            for u in 0..2 {
                let mut plus = policy.clone();
                plus.logits_mut()[c][u] += h;
                let mut minus = policy.clone();
                minus.logits_mut()[c][u] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let scale = fd.abs().max(grad[c][u].abs()).max(1.0);
                fd_ok &= (fd - grad[c][u]).abs() / scale < 1e-5;
            }
        }
    }

    // Unbiasedness: the mean of 1e5 stochastic step gradients (no advantage
    // normalization, frozen policy) must land within three standard errors
    // of the exact gradient. Depth one, so the per-token averaging is a
    // factor of one.
    let (env, reference) = two_traj_env();
    let mut cfg = base_trainer(KlMode::None, GuideSpec::constant(), 1, 123);
    cfg.normalize_advantages = false;
    cfg.learning_rate = 1e-12;
    let exact = exact_policy_gradient(
        &reference,
        &env,
        &reference,
        cfg.beta,
        KlMode::None,
        &[1.0, 1.0],
    )
    .unwrap();
    let mut state = TrainState::new(reference.clone(), cfg.seed);
    let passes = 100_000;
    let mut mean = [0.0f64; 2];
    let mut m2 = [0.0f64; 2];
    for i in 0..passes {
        let out = grpo_step(&mut state, &env, &reference, &cfg).unwrap();
        for u in 0..2 {
            let x = out.grad[0][u];
            let delta = x - mean[u];
            mean[u] += delta / (i + 1) as f64;
            m2[u] += delta * (x - mean[u]);
        }
    }
    let mut unbiased_ok = true;
    for u in 0..2 {
        let se = (m2[u] / (passes as f64 * (passes - 1) as f64)).sqrt();
        unbiased_ok &= (mean[u] - exact[0][u]).abs() < 3.0 * se + 1e-9;
    }

    conclude(
        8,
        "gradient correctness",
        t0,
        Duration::from_secs(300),
        fd_ok && unbiased_ok,
        &format!("finite differences {fd_ok}, unbiasedness {unbiased_ok}"),
    );
}

#[test]
fn criterion_09_convergence_to_closed_form() {
    let t0 = Instant::now();
    let (env, reference) = two_traj_env();
    let cfg = base_trainer(KlMode::Reverse, GuideSpec::constant(), 500, 42);
    let (_, policy) = train(&cfg, &env, &reference, None).unwrap();
    let got = policy.exact_distribution(&env).unwrap();
    let ref_dist = reference.exact_distribution(&env).unwrap();
    let want = stationary_reverse_kl(&ref_dist, &env.reward_vector(), cfg.beta).unwrap();
    let tv: f64 = got
        .probs
        .iter()
        .zip(&want.dist.probs)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 2.0;
    conclude(
        9,
        "convergence to closed form",
        t0,
        Duration::from_secs(60),
        tv < 0.05,
        &format!("total variation {tv}"),
    );
}

#[test]
fn criterion_10_unanchored_reward_direction() {
    let t0 = Instant::now();
    let seeds = 10u64;
    let mut ok_seeds = 0u64;
    for s in 0..seeds {
        let rme = make_rare_mode_env(
            &RareModeSpec {
                rare_mass: 1e-5,
                branch_entropy_target: 1.2,
                num_common_valid: 3,
                support_epsilon: Some(1e-4),
            },
            200 + s,
        )
        .unwrap();
        let seed = derive_seed(77, s);
        let cfg_n = base_trainer(KlMode::None, GuideSpec::constant(), 300, seed);
        let cfg_r = base_trainer(KlMode::Reverse, GuideSpec::constant(), 300, seed);
        let (log_n, pol_n) = train(&cfg_n, &rme.env, &rme.reference, None).unwrap();
        let (log_r, pol_r) = train(&cfg_r, &rme.env, &rme.reference, None).unwrap();
        let mean_reward = |log: &[sage_lab::trainer::MetricsRecord]| {
            log.iter().map(|r| r.mean_train_reward).sum::<f64>() / log.len() as f64
        };
        let reward_ok = mean_reward(&log_n) >= mean_reward(&log_r) - 1e-12;

        // Sibling environment: identical valid set, reference perturbed by
        // small logit noise. The graded evaluation samples from the trained
        // policies on that sibling.
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut sib_rng = ChaCha12Rng::seed_from_u64(derive_seed(88, s));
        let sib_logits: Vec<Vec<f64>> = rme
            .reference
            .logits()
            .iter()
            .map(|row| row.iter().map(|&l| l + noise.sample(&mut sib_rng)).collect())
            .collect();
        let _sibling_reference = TabularPolicy::from_logits(&rme.env, sib_logits).unwrap();
        let mut er_n = ChaCha12Rng::seed_from_u64(derive_seed(seed, 501));
        let mut er_r = ChaCha12Rng::seed_from_u64(derive_seed(seed, 502));
        let ev_n = evaluate_policy(&pol_n, &rme.env, 256, &[1], 1e-4, &mut er_n).unwrap();
        let ev_r = evaluate_policy(&pol_r, &rme.env, 256, &[1], 1e-4, &mut er_r).unwrap();
        let pass_ok = ev_n.pass_at_k[&1] <= ev_r.pass_at_k[&1] + 1e-12;

        if reward_ok && pass_ok {
            ok_seeds += 1;
        }
    }
    conclude(
        10,
        "unanchored reward direction",
        t0,
        Duration::from_secs(600),
        ok_seeds * 2 > seeds,
        &format!("{ok_seeds}/{seeds} seeds satisfied both directions"),
    );
}

#[test]
fn criterion_11_guided_support_expansion() {
    let t0 = Instant::now();
    let trials = 20u64;
    let epsilon = PRESERVATION_EPSILON;
    let spec = preservation_env_spec();
    let mut sage_in = 0u64;
    let mut reverse_in = 0u64;
    let mut passk_ok = 0u64;
    for trial in 0..trials {
        let bee = make_branch_explore_env(&spec, 100 + trial).unwrap();
        assert!(
            bee.rare_mass < epsilon,
            "rare trajectory must start outside the empirical support"
        );
        let seed = derive_seed(42, trial);
        let cfg_s = preservation_trainer_config(KlMode::Sage, GuideSpec::branch(30.0, 1.2), seed);
        let cfg_r = preservation_trainer_config(KlMode::Reverse, GuideSpec::constant(), seed);
        let (_, pol_s) = train(&cfg_s, &bee.env, &bee.reference, None).unwrap();
        let (_, pol_r) = train(&cfg_r, &bee.env, &bee.reference, None).unwrap();
        if pol_s.trajectory_prob(&bee.env, &bee.y_star).unwrap() > epsilon {
            sage_in += 1;
        }
        if pol_r.trajectory_prob(&bee.env, &bee.y_star).unwrap() > epsilon {
            reverse_in += 1;
        }
        let mut rs = ChaCha12Rng::seed_from_u64(derive_seed(seed, 900));
        let mut rr = ChaCha12Rng::seed_from_u64(derive_seed(seed, 901));
        let es = evaluate_policy(&pol_s, &bee.env, 256, &[1, 64], epsilon, &mut rs).unwrap();
        let er = evaluate_policy(&pol_r, &bee.env, 256, &[1, 64], epsilon, &mut rr).unwrap();
        if es.pass_at_k[&64] >= er.pass_at_k[&64] {
            passk_ok += 1;
        }
    }
    conclude(
        11,
        "guided support expansion",
        t0,
        Duration::from_secs(900),
        sage_in * 2 > trials && reverse_in == 0 && passk_ok * 2 > trials,
        &format!(
            "shaped in-support {sage_in}/{trials}, plain in-support {reverse_in}/{trials}, \
             pass@k_max no worse {passk_ok}/{trials}"
        ),
    );
}

#[test]
fn criterion_12_run_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        r#"
            seed = 9
            [env.rare_mode]
            rare_mass = 1e-4
            branch_entropy_target = 2.0
            num_common_valid = 2
            [trainer]
            steps = 40
            kl_mode = "sage"
            [guide]
            family = "branch"
            gamma = 2.0
            tau = 0.8
            [eval]
            cadence = 10
            n_samples = 64
            ks = [1, 8]
        "#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_sage-lab");
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = std::process::Command::new(bin)
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "run {name} failed");
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    conclude(
        12,
        "run determinism",
        t0,
        Duration::from_secs(600),
        !csvs[0].is_empty() && csvs[0] == csvs[1],
        "repeated runs produced different metrics.csv bytes",
    );
}
