//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qint::agent::{compute_targets, loss_gradients, DistributionalModel};
use qint::commands::{cmd_explain, cmd_plot, StateSource};
use qint::config::RunConfig;
use qint::env::NUM_ACTIONS;
use qint::explain::probability_of_success;
use qint::head::{dueling_combine, project_target, AtomSupport, CategoricalValueDistribution, DuelingLogits};
use qint::net::{NetShape, NetworkGraph};
use qint::replay::{NStepAccumulator, PrioritizedReplay, ReplayConfig, SumTree, Transition};
use qint::training::{run_evaluation, run_training, UniformRandomPolicy, TrainingOutcome};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn timed(limit: Duration, f: impl FnOnce() -> Verdict) -> Verdict {
    let t = Instant::now();
    let v = f();
    let elapsed = t.elapsed();
    let in_time = elapsed <= limit;
    verdict(v.pass && in_time, format!("{} [{:.2?} of {:?}]", v.detail, elapsed, limit))
}

// 1 -------------------------------------------------------------------------

fn reported_values() -> Verdict {
    let lo = probability_of_success(6.85, 30.0).unwrap();
    let hi = probability_of_success(7.15, 30.0).unwrap();
    let near = (lo - 0.67928).abs() <= 5e-4 && (hi - 0.68859).abs() <= 5e-4;
    let inside = [lo, hi].iter().all(|&p| (0.678 - 1e-3..=0.688 + 1e-3).contains(&p));
    verdict(near && inside, format!("P(6.85, 30) = {lo:.5}, P(7.15, 30) = {hi:.5}"))
}

// 2 -------------------------------------------------------------------------

fn transform_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    // 0.5 · ulp of |log10(1/100)| = 2
    let boundary_tol = 0.5 * (2.0f64.next_up() - 2.0);
    for i in 0..100_000 {
        let q = rng.gen_range(-1e3..=1e4);
        let r_s = 1e3 * (1.0 - rng.gen::<f64>());
        let p = probability_of_success(q, r_s).unwrap();
        if !(0.0..=1.0).contains(&p) {
            failures.push(format!("pair {i}: out of range {p}"));
        }
        let q2 = q + rng.gen_range(0.0..100.0);
        if probability_of_success(q2, r_s).unwrap() < p {
            failures.push(format!("pair {i}: not monotone at q = {q}"));
        }
        for c in [1e-3, 1.0, 1e3] {
            let scaled = probability_of_success(c * q, c * r_s).unwrap();
            if (scaled - p).abs() > 1e-12 {
                failures.push(format!("pair {i}: scale {c} moved {p} to {scaled}"));
            }
        }
        if probability_of_success(r_s, r_s).unwrap() != 1.0 {
            failures.push(format!("pair {i}: P(r, r) != 1 for r = {r_s}"));
        }
        let zero = probability_of_success(r_s / 100.0, r_s).unwrap();
        if zero.abs() > boundary_tol {
            failures.push(format!("pair {i}: P(r/100, r) = {zero:e}"));
        }
    }
    let detail = failures.first().cloned().unwrap_or_else(|| "1e5 pairs".into());
    verdict(failures.is_empty(), format!("{} failures; {detail}", failures.len()))
}

// 3 -------------------------------------------------------------------------

fn dueling_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (actions, atoms) = (6, 51);
    let (mut worst_sum, mut worst_shift, mut negative) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..10_000 {
        let v = Array1::from_shape_fn(atoms, |_| rng.gen_range(-20.0..20.0));
        let a = Array2::from_shape_fn((actions, atoms), |_| rng.gen_range(-20.0..20.0));
        let shift = Array1::from_shape_fn(atoms, |_| rng.gen_range(-50.0..50.0));
        let d = dueling_combine(&DuelingLogits::new(v.clone(), a.clone()).unwrap()).unwrap();
        let shifted = dueling_combine(&DuelingLogits::new(v, &a + &shift).unwrap()).unwrap();
        for k in 0..actions {
            let row = d.row(k);
            worst_sum = worst_sum.max((row.sum() - 1.0).abs());
            negative += row.iter().filter(|&&x| x < 0.0).count();
            for (x, y) in row.iter().zip(shifted.row(k)) {
                worst_shift = worst_shift.max((x - y).abs());
            }
        }
    }
    verdict(
        worst_sum <= 1e-12 && worst_shift <= 1e-12 && negative == 0,
        format!("max |Σ−1| = {worst_sum:e}, max shift change = {worst_shift:e}, negatives = {negative}"),
    )
}

// 4 -------------------------------------------------------------------------

/// Every source atom spreads its mass over the support with a triangular
/// kernel of width Δ centred on its clamped Bellman image.
fn projection_oracle(p: &[f64], z: &[f64], v_min: f64, v_max: f64, reward: f64, discount: f64, truncated: bool) -> Vec<f64> {
    let delta = (v_max - v_min) / (z.len() - 1) as f64;
    let kernel = |tz: f64, zi: f64| (1.0 - (tz - zi).abs() / delta).max(0.0);
    let mut out = vec![0.0; z.len()];
    if truncated {
        let tz = reward.clamp(v_min, v_max);
        for (i, o) in out.iter_mut().enumerate() {
            *o = kernel(tz, z[i]);
        }
        return out;
    }
    for (j, &pj) in p.iter().enumerate() {
        let tz = (reward + discount * z[j]).clamp(v_min, v_max);
        for (i, o) in out.iter_mut().enumerate() {
            *o += pj * kernel(tz, z[i]);
        }
    }
    out
}

fn projection_matches_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut worst_mass) = (0.0f64, 0.0f64);
    for atoms in [2usize, 3, 5] {
        for case in 0..10_000 {
            let v_min = rng.gen_range(-20.0..0.0);
            let v_max = v_min + rng.gen_range(0.5..40.0);
            let support = AtomSupport::new(atoms, v_min, v_max).unwrap();
            let z = support.atoms().to_vec();
            let raw: Vec<f64> = (0..atoms).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            // some rewards land exactly on atoms
            let reward = if case % 10 == 0 { z[rng.gen_range(0..atoms)] } else { rng.gen_range(v_min - 5.0..v_max + 5.0) };
            let discount = if case % 7 == 0 { 1.0 } else { rng.gen::<f64>() };
            let truncated = rng.gen_bool(0.2);
            let got = project_target(&p, &support, reward, discount, truncated);
            let want = projection_oracle(&p, &z, v_min, v_max, reward, discount, truncated);
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
            worst_mass = worst_mass.max((got.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(worst <= 1e-12 && worst_mass <= 1e-12, format!("max deviation {worst:e}, max mass error {worst_mass:e}"))
}

// 5 -------------------------------------------------------------------------

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = NetShape { input_dim: 8, trunk: vec![16], head_hidden: 16, n_actions: 6, n_atoms: 11 };
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut net = NetworkGraph::build_random(&shape, &mut rng).unwrap();
        net.resample_noise(&mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let obs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let actions: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
        let mut targets = Array2::from_shape_fn((4, 11), |_| rng.gen::<f64>());
        for mut r in targets.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        let loss = |n: &NetworkGraph| -> f64 {
            let (l, _) = loss_gradients(n, &obs, &actions, targets.view(), &weights, false).unwrap();
            l.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, grads) = loss_gradients(&net, &obs, &actions, targets.view(), &weights, false).unwrap();
        for t in 0..grads.tensors.len() {
            for i in 0..grads.tensors[t].len() {
                let orig = net.tensors_mut()[t][i];
                net.tensors_mut()[t][i] = orig + h;
                let up = loss(&net);
                net.tensors_mut()[t][i] = orig - h;
                let down = loss(&net);
                net.tensors_mut()[t][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.tensors[t][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    verdict(worst < 1e-5, format!("max relative error {worst:e} over 20 nets"))
}

// 6 -------------------------------------------------------------------------

fn replay_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let cap = 1000;
    let mut tree = SumTree::new(cap);
    let mut leaves = vec![0.0; cap];
    for _ in 0..100_000 {
        let i = rng.gen_range(0..cap);
        let p = rng.gen_range(0.0..10.0);
        tree.set(i, p).unwrap();
        leaves[i] = p;
    }
    let root_err = (tree.total() - leaves.iter().sum::<f64>()).abs();

    let priorities = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 13.0];
    let mut replay = PrioritizedReplay::new(ReplayConfig { capacity: 8, stratified: true, ..ReplayConfig::default() }).unwrap();
    for (i, &p) in priorities.iter().enumerate() {
        let t = Transition { obs: vec![i as f64], action: 0, n_step_reward: 0.0, next_obs: vec![], discount: 0.0, truncated: true };
        replay.add(t);
        replay.set_priority(i, p).unwrap();
    }
    let mut counts = [0u64; 8];
    for _ in 0..125_000 {
        for i in replay.sample(8, &mut rng).unwrap().indices {
            counts[i] += 1;
        }
    }
    let total: f64 = priorities.iter().sum();
    let worst_freq = priorities
        .iter()
        .zip(counts)
        .map(|(p, c)| (c as f64 / 1e6 - p / total).abs() / (p / total))
        .fold(0.0f64, f64::max);

    let (n, gamma) = (3usize, 0.99);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let len = rng.gen_range(1..80);
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..30.0)).collect();
        let resets: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.1)).collect();
        let mut acc = NStepAccumulator::new(n, gamma);
        let mut got = Vec::new();
        for t in 0..len {
            got.extend(acc.push(vec![t as f64], 0, rewards[t], &[t as f64 + 1.0], resets[t]));
        }
        got.extend(acc.finish(&[len as f64]));
        got.sort_by(|a, b| a.obs[0].total_cmp(&b.obs[0]));
        if got.len() != len {
            mismatches += 1;
            continue;
        }
        for (t, tr) in got.iter().enumerate() {
            // Brute force: add discounted rewards until n steps, a reset, or the end.
            let (mut g, mut scale, mut k, mut truncated) = (0.0, 1.0, 0, false);
            while k < n && t + k < len {
                g += scale * rewards[t + k];
                scale *= gamma;
                k += 1;
                if resets[t + k - 1] {
                    truncated = true;
                    break;
                }
            }
            let discount = if truncated { 0.0 } else { gamma.powi(k as i32) };
            let ok = tr.obs == [t as f64]
                && tr.n_step_reward == g
                && tr.discount == discount
                && tr.truncated == truncated
                && tr.next_obs == [(t + k) as f64];
            mismatches += !ok as usize;
        }
    }
    verdict(
        root_err <= 1e-9 && worst_freq <= 0.02 && mismatches == 0,
        format!("root error {root_err:e}, worst frequency error {:.3}%, n-step mismatches {mismatches}", worst_freq * 100.0),
    )
}

// 7 -------------------------------------------------------------------------

/// A fixed distribution per state, looked up from the one-hot observation.
struct Tabular {
    dists: Vec<CategoricalValueDistribution>,
}

impl DistributionalModel for Tabular {
    fn distributions(&self, obs: &[&[f64]]) -> qint::Result<Vec<CategoricalValueDistribution>> {
        Ok(obs.iter().map(|o| self.dists[if o[0] > 0.5 { 0 } else { 1 }].clone()).collect())
    }
}

fn double_q_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let states = [vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let atoms = rng.gen_range(3..12);
        let v_min = rng.gen_range(-10.0..-1.0);
        let support = AtomSupport::new(atoms, v_min, rng.gen_range(1.0..10.0)).unwrap();
        let mut model = || Tabular {
            dists: (0..2)
                .map(|_| {
                    let v = Array1::from_shape_fn(atoms, |_| rng.gen_range(-3.0..3.0));
                    let a = Array2::from_shape_fn((2, atoms), |_| rng.gen_range(-3.0..3.0));
                    dueling_combine(&DuelingLogits::new(v, a).unwrap()).unwrap()
                })
                .collect(),
        };
        let online = model();
        let target = model();
        // every (state, action) pair once, with its own dynamics
        let mut batch = Vec::new();
        for s in 0..2 {
            for a in 0..2 {
                let next = rng.gen_range(0..2);
                let truncated = rng.gen_bool(0.25);
                batch.push(Transition {
                    obs: states[s].clone(),
                    action: a,
                    n_step_reward: rng.gen_range(-12.0..12.0),
                    next_obs: states[next].clone(),
                    discount: if truncated { 0.0 } else { rng.gen_range(0.5..1.0) },
                    truncated,
                });
            }
        }
        let got = compute_targets(&batch, &online, &target, &support).unwrap();
        for (k, t) in batch.iter().enumerate() {
            let next = if t.next_obs[0] > 0.5 { 0 } else { 1 };
            // enumerate actions: online expectation picks, ties to the lower index
            let z = support.atoms();
            let q = |a: usize| online.dists[next].row(a).iter().zip(z).map(|(p, z)| p * z).sum::<f64>();
            let best = if q(1) > q(0) { 1 } else { 0 };
            let eval = target.dists[next].row(best).to_vec();
            let want = projection_oracle(&eval, z, support.v_min(), support.v_max(), t.n_step_reward, t.discount, t.truncated);
            for (g, w) in got.row(k).iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    verdict(worst <= 1e-12, format!("max deviation {worst:e} over 100 parameterizations"))
}

// 8 -------------------------------------------------------------------------

const SEEDS: u64 = 9;

struct DeskRuns {
    baseline: f64,
    outcomes: Vec<(TrainingOutcome, Duration)>,
}

fn desk_runs(root: &Path) -> DeskRuns {
    let config = RunConfig::default();
    let r_s = config.introspection.static_rs(&config.env);
    let baseline = (0..SEEDS)
        .map(|s| {
            let mut policy = UniformRandomPolicy::new(s);
            let report = run_evaluation(&mut policy, &config.env, config.agent.stack_depth, config.agent.eval_steps, config.agent.eval_seed, r_s)
                .unwrap();
            report.avg_reward
        })
        .sum::<f64>()
        / SEEDS as f64;
    let outcomes = (0..SEEDS)
        .map(|seed| {
            let mut c = config.clone();
            c.agent.seed = seed;
            let t = Instant::now();
            let out = run_training(&c, &root.join(format!("seed_{seed}"))).unwrap();
            let elapsed = t.elapsed();
            let last = out.reports.last().unwrap();
            eprintln!(
                "  seed {seed}: avg reward {:.4} ({:.2}× random), {} clears, {:.0?}",
                last.avg_reward,
                last.avg_reward / baseline,
                last.swarm_clears,
                elapsed
            );
            (out, elapsed)
        })
        .collect();
    DeskRuns { baseline, outcomes }
}

fn desk_learning(runs: &DeskRuns) -> Verdict {
    let limit = Duration::from_secs(30 * 60);
    let passing = runs
        .outcomes
        .iter()
        .filter(|(out, elapsed)| {
            let last = out.reports.last().unwrap();
            last.avg_reward >= 3.0 * runs.baseline && last.swarm_clears >= 1 && *elapsed <= limit
        })
        .count();
    let slowest = runs.outcomes.iter().map(|o| o.1).max().unwrap_or_default();
    verdict(
        passing >= 7,
        format!(
            "{passing}/{SEEDS} seeds at ≥3× random ({:.4} per step) with a clear; slowest seed {:.0?}",
            runs.baseline, slowest
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn parse_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn explain_and_plot(run: &TrainingOutcome) -> Verdict {
    let config = RunConfig::load(&run.run_dir.join("config.txt")).unwrap();
    let record = cmd_explain(&config, &run.final_checkpoint, StateSource::Initial, Some(&run.run_dir)).unwrap();
    let plots = cmd_plot(&run.run_dir, None).unwrap();
    let ps = parse_csv(&plots.ps_csv);
    let q = parse_csv(&plots.q_csv);
    let in_range = ps.iter().flatten().all(|p| (0.0..=1.0).contains(p)) && record.ps_values.iter().all(|p| (0.0..=1.0).contains(p));
    let widths = ps.iter().all(|r| r.len() == NUM_ACTIONS) && ps.len() == q.len() && !ps.is_empty();
    // The transform is monotone, so argmax Q must also maximise P̂s, and no
    // pair of actions may swap order.
    let ordered = |qs: &[f64], pss: &[f64]| {
        let best = qint::head::argmax(qs);
        let max_ps = pss.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pairs = (0..qs.len()).all(|i| (0..qs.len()).all(|j| !(qs[i] > qs[j]) || pss[i] >= pss[j]));
        pss[best] == max_ps && pairs
    };
    let consistent = ps.iter().zip(&q).all(|(p, q)| ordered(q, p)) && ordered(&record.q_values, &record.ps_values);
    let chosen_is_best = record.chosen_action == qint::head::argmax(&record.q_values);
    let final_row = ps.last().map(|r| format!("{r:.3?}")).unwrap_or_default();
    verdict(
        in_range && widths && consistent && chosen_is_best,
        format!("{} segments, final P̂s {final_row}, explain: {}", ps.len(), record.rendered_text),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("criterion {n} ({name}): {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "reported values", timed(Duration::from_secs(1), reported_values));
    report(2, "transform properties", timed(Duration::from_secs(1), transform_properties));
    report(3, "dueling invariants", timed(Duration::from_secs(5), dueling_invariants));
    report(4, "projection oracle", timed(Duration::from_secs(5), projection_matches_oracle));
    report(5, "gradient check", timed(Duration::from_secs(30), gradient_check));
    report(6, "replay", timed(Duration::from_secs(30), replay_checks));
    report(7, "double-Q oracle", timed(Duration::from_secs(5), double_q_oracle));

    let root = tempfile::tempdir().unwrap();
    let runs = desk_runs(root.path());
    report(8, "desk learning", desk_learning(&runs));
    let first = &runs.outcomes[0].0;
    report(9, "explain and plot", timed(Duration::from_secs(5), || explain_and_plot(first)));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
