//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//! `RISE_ACCEPTANCE=1,5,9` restricts the run to a subset; with
//! `RISE_ACCEPTANCE_STRICT=1` any failing criterion makes the process exit non-zero.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rise_core::approx::gradcheck::{finite_difference, max_relative_error};
use rise_core::approx::{gradient, Approximator};
use rise_core::domain::{Episode, Observation, Source, TaskId};
use rise_core::dynamics::{build_transitions, mean_gap, mean_sim_gap, gap_probes, train_dynamics, DynamicsConfig, DynamicsModel};
use rise_core::env::{scripted_expert, simulate_chunk, state_at, step_calls, Corruption, TaskSpec, HORIZON};
use rise_core::norm::ObsNormalizer;
use rise_core::pipeline::{
    ablation_arms, evaluate_arm, fit_dynamics, fit_value, fit_warmup, improve, AblationAxis, ArmResult, Datasets, Run,
    RunConfig, WarmStart,
};
use rise_core::selfimprove::ema_update;
use rise_core::value::{
    advantage, advantage_from_values, fit_records, heldout_spearman, train_value, TdRec, ValueConfig, ValueModel,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// World-model and warm-up artifacts for one seed of the default config.
struct SeedRun {
    config: RunConfig,
    data: Datasets,
    dynamics: DynamicsModel,
    value: ValueModel,
    warm: WarmStart,
}

/// Loop results for one seed: top-bin results per policy plus sweep arms.
struct LoopRun {
    warm: ArmResult,
    improved: ArmResult,
    improved_bin1: ArmResult,
    arms: BTreeMap<String, ArmResult>,
    step_calls: u64,
}

#[derive(Default)]
struct Shared {
    seeds: BTreeMap<u64, SeedRun>,
    loops: BTreeMap<u64, LoopRun>,
    loop_secs: f64,
}

impl Shared {
    fn seed(&mut self, seed: u64) -> &SeedRun {
        self.seeds.entry(seed).or_insert_with(|| {
            let config = RunConfig { seed, ..RunConfig::default() };
            let data = rise_core::pipeline::generate_data(&config).expect("datasets");
            let (dynamics, _) = fit_dynamics(&config, &data).expect("dynamics");
            let (value, _) = fit_value(&config, &data).expect("value");
            let warm = fit_warmup(&config, &data.train, &value).expect("warm-up");
            SeedRun { config, data, dynamics, value, warm }
        })
    }

    fn all_seeds(&mut self) {
        for s in SEEDS {
            self.seed(s);
        }
    }

    fn loops(&mut self) -> &BTreeMap<u64, LoopRun> {
        if self.loops.is_empty() {
            self.all_seeds();
            let t0 = Instant::now();
            for s in SEEDS {
                let r = &self.seeds[&s];
                let c = &r.config;
                let (warm, n) = (&r.warm.policy, r.warm.policy.binning.n_bins());
                let eval_seed = c.seed_for("eval");
                let episodes = c.eval.episodes;
                let run = |lc: &rise_core::selfimprove::LoopConfig| {
                    improve(lc, &r.dynamics, &r.value, warm, &r.warm.dataset, &r.data.train, c.seed_for("loop")).expect("loop")
                };
                let before = step_calls();
                let base = run(&c.improve);
                let calls = step_calls() - before;
                let improved = evaluate_arm(&base.policy, &c.tasks, n, episodes, eval_seed).expect("eval");
                let mut arms = BTreeMap::new();
                for axis in [AblationAxis::OfflineRatio, AblationAxis::OnlineToggles] {
                    for arm in ablation_arms(axis, &c.improve, n) {
                        let lc = arm.loop_config.expect("loop arm");
                        let result = if lc == c.improve {
                            improved.clone()
                        } else {
                            evaluate_arm(&run(&lc).policy, &c.tasks, n, episodes, eval_seed).expect("eval")
                        };
                        arms.insert(arm.name, result);
                    }
                }
                self.loops.insert(
                    s,
                    LoopRun {
                        warm: evaluate_arm(warm, &c.tasks, n, episodes, eval_seed).expect("eval"),
                        improved_bin1: evaluate_arm(&base.policy, &c.tasks, 1, episodes, eval_seed).expect("eval"),
                        improved,
                        arms,
                        step_calls: calls,
                    },
                );
            }
            self.loop_secs = t0.elapsed().as_secs_f64();
        }
        &self.loops
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn random_obs(task: TaskId, rng: &mut ChaCha8Rng) -> Observation {
    let spec = TaskSpec::get(task);
    let v = (0..spec.d_o).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Observation::new(v, spec.layout.clone()).expect("finite observation")
}

fn c1_advantage() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for i in 0..1000 {
        let h = rng.gen_range(1..=8);
        let v0: f64 = rng.gen_range(-2.0..2.0);
        let fut: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut acc = 0.0;
        for v in &fut {
            acc += v;
        }
        if advantage_from_values(v0, &fut) != acc / h as f64 - v0 {
            mismatches += 1;
        }
        // Through a value network on observations.
        let task = TaskId::ALL[i % 2];
        let cfg = ValueConfig { hidden: vec![8], ..Default::default() };
        let model = ValueModel::new(ObsNormalizer::identity(), &cfg, i as u64).expect("model");
        let obs = random_obs(task, &mut rng);
        let frames: Vec<Observation> = (0..HORIZON).map(|_| random_obs(task, &mut rng)).collect();
        let mut acc = 0.0;
        for f in &frames {
            acc += model.value(f, task).expect("value");
        }
        let oracle = acc / HORIZON as f64 - model.value(&obs, task).expect("value");
        if advantage(&model, &obs, &frames, task).expect("advantage") != oracle {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches over 1000 scalar and 1000 network assignments"))
}

fn c2_td_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in SEEDS {
        for gamma in [0.9, 0.995] {
            for len in 1..=5usize {
                for reward in [1.0, -1.0] {
                    let cfg = ValueConfig {
                        gamma,
                        hidden: vec![32, 32],
                        batch_size: 16,
                        lr: 3e-3,
                        min_lr_ratio: 0.05,
                        phase1_steps: 0,
                        phase2_steps: 1500,
                        target_refresh: 50,
                        eval_every: 0,
                    };
                    let mut model = ValueModel::new(ObsNormalizer::identity(), &cfg, seed).expect("model");
                    let dim = model.net.input_dim();
                    let x = |k: usize| {
                        let mut v = vec![0.0; dim];
                        v[k] = 1.0;
                        v
                    };
                    let recs: Vec<TdRec> = (0..len)
                        .map(|k| TdRec {
                            x: x(k),
                            x_next: (k + 1 < len).then(|| x(k + 1)),
                            reward: if k + 1 == len { reward } else { 0.0 },
                        })
                        .collect();
                    fit_records(&mut model, &[], &recs, &cfg, seed, |_| Ok((0.0, 0.0))).expect("fit");
                    for (k, r) in recs.iter().enumerate() {
                        let analytic = gamma.powi((len - 1 - k) as i32) * reward;
                        let v = model.value_encoded(&r.x).expect("value");
                        worst = worst.max((v - analytic).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    verdict(worst <= 0.05, format!("max |V - discounted return| = {worst:.4} over {cases} chains"))
}

fn split_task(eps: &[Episode], task: TaskId) -> Vec<Episode> {
    eps.iter().filter(|e| e.task == task).cloned().collect()
}

fn c3_progress(shared: &mut Shared) -> Verdict {
    let mut worst = f64::INFINITY;
    let mut lines = Vec::new();
    for s in SEEDS {
        let r = shared.seed(s);
        let cfg = ValueConfig { phase2_steps: 0, eval_every: 0, ..r.config.value.clone() };
        let mut m = ValueModel::new(ObsNormalizer::fit(&r.data.train), &cfg, r.config.seed_for("value-init")).expect("model");
        train_value(&mut m, &r.data.train, &[], &cfg, r.config.seed_for("value")).expect("phase 1");
        let per: Vec<f64> = r
            .config
            .tasks
            .iter()
            .map(|&t| heldout_spearman(&m, &split_task(&r.data.heldout, t)).expect("spearman"))
            .collect();
        worst = per.iter().copied().fold(worst, f64::min);
        lines.push(format!("{:.3}/{:.3}", per[0], per[1]));
    }
    verdict(worst >= 0.9, format!("min rho {worst:.3}; per seed belt/latch {}", lines.join(" ")))
}

fn c4_failure_sensitivity(shared: &mut Shared) -> Verdict {
    let r = shared.seed(SEEDS[0]);
    let experts: Vec<&Episode> = r.data.heldout.iter().filter(|e| e.source == Source::Expert).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut wins, mut n) = (0, 0);
    while n < 200 {
        let e = experts[rng.gen_range(0..experts.len())];
        let t = rng.gen_range(0..e.horizon());
        let s = state_at(e, t).expect("replay");
        let good = scripted_expert(&s, None);
        let bad = (0..50)
            .map(|_| scripted_expert(&s, Some(&Corruption::sample(e.task, &mut rng))))
            .find(|b| *b != good);
        let Some(bad) = bad else { continue };
        let o = s.observe();
        let ag = advantage(&r.value, &o, &simulate_chunk(&s, &good), e.task).expect("advantage");
        let ab = advantage(&r.value, &o, &simulate_chunk(&s, &bad), e.task).expect("advantage");
        wins += (ag > ab) as usize;
        n += 1;
    }
    let frac = wins as f64 / n as f64;
    verdict(frac >= 0.9, format!("expert > corrupted on {wins}/{n} held-out states ({:.1}%)", 100.0 * frac))
}

fn c5_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let depth = rng.gen_range(1..4);
        let mut sizes = vec![rng.gen_range(1..6)];
        for _ in 0..depth {
            sizes.push(rng.gen_range(2..7));
        }
        sizes.push(rng.gen_range(1..4));
        let net = Approximator::init(&sizes, 100 + i).expect("net");
        let rows = rng.gen_range(1..5);
        let x = Array2::from_shape_fn((rows, sizes[0]), |_| rng.gen_range(-1.0..1.0));
        let targets = Array2::from_shape_fn((rows, *sizes.last().unwrap()), |_| rng.gen_range(-1.0..1.0));
        let loss = |r: usize, out: ndarray::ArrayView1<f64>| {
            let d = &out - &targets.row(r);
            (d.mapv(|v| v * v).sum(), d.mapv(|v| 2.0 * v))
        };
        let (_, g) = gradient(&net, x.view(), loss).expect("backprop");
        let fd = finite_difference(&net, x.view(), loss, 1e-6).expect("finite differences");
        worst = worst.max(max_relative_error(&g, &fd, 1e-6));
    }
    let _ = Array1::<f64>::zeros(0);
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 20 networks"))
}

fn c6_dynamics(shared: &mut Shared) -> Verdict {
    let r = shared.seed(SEEDS[0]);
    let held = build_transitions(&r.dynamics, &r.data.heldout).expect("transitions");
    let mse = r.dynamics.one_step_mse(&held).expect("mse");
    let base = r.dynamics.baseline_one_step_mse(&held).expect("baseline");
    let probes = gap_probes(&r.data.heldout, r.dynamics.n_hist, r.config.eval.probe_stride).expect("probes");
    let gap = mean_gap(&r.dynamics, &probes).expect("gap");
    let sim = mean_sim_gap(&probes);
    verdict(
        mse < 0.05 && mse < 0.25 * base && gap >= 0.5 * sim,
        format!("one-step mse {mse:.4} (baseline {base:.4}); gap {gap:.4} vs simulator {sim:.4}"),
    )
}

fn c7_task_centric(shared: &mut Shared) -> Verdict {
    let mut wins = 0;
    let mut lines = Vec::new();
    for s in SEEDS {
        let r = shared.seed(s);
        let mut mses = Vec::new();
        for k in [1, TaskId::count()] {
            let cfg = DynamicsConfig { k_tasks: k, eval_every: 0, ..r.config.dynamics.clone() };
            let norm = ObsNormalizer::fit(&r.data.train);
            let mut m = DynamicsModel::new(norm, &cfg, HORIZON, r.config.seed_for("dynamics-init")).expect("model");
            let train = build_transitions(&m, &r.data.train).expect("transitions");
            let held = build_transitions(&m, &r.data.heldout).expect("transitions");
            train_dynamics(&mut m, &train, &[], &[], &cfg, r.config.seed_for("dynamics")).expect("train");
            mses.push(m.one_step_mse(&held).expect("mse"));
        }
        wins += (mses[0] <= mses[1]) as usize;
        lines.push(format!("{:.4}/{:.4}", mses[0], mses[1]));
    }
    verdict(wins >= 4, format!("K=1 <= shuffled on {wins}/5 seeds; K=1/shuffled {}", lines.join(" ")))
}

fn c8_ema() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let decay = rng.gen_range(0.5..0.9999);
        let k = rng.gen_range(1..50);
        let r0: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut r = r0.clone();
        for _ in 0..k {
            ema_update(&mut r, &b, decay).expect("ema");
        }
        let dk = decay.powi(k);
        for i in 0..n {
            worst = worst.max((r[i] - (dk * r0[i] + (1.0 - dk) * b[i])).abs());
        }
    }
    verdict(worst <= 1e-12, format!("max deviation from closed form {worst:.2e}"))
}

fn success(r: &ArmResult, task: TaskId) -> f64 {
    r.task(task).expect("task evaluated").success_rate
}

fn c9_improvement(shared: &mut Shared) -> Verdict {
    let loops = shared.loops();
    let mut pass = true;
    let mut parts = Vec::new();
    for task in TaskId::ALL {
        let w = mean(loops.values().map(|l| success(&l.warm, task)));
        let p = mean(loops.values().map(|l| success(&l.improved, task)));
        pass &= p - w >= 0.10;
        parts.push(format!("{task} {:.1}% -> {:.1}% ({:+.1})", 100.0 * w, 100.0 * p, 100.0 * (p - w)));
    }
    let secs = shared.loop_secs;
    verdict(pass, format!("{}; loop+eval {secs:.0}s", parts.join("; ")))
}

fn c10_bin_contrast(shared: &mut Shared) -> Verdict {
    let loops = shared.loops();
    let hi = mean(loops.values().map(|l| success(&l.improved, TaskId::BeltSort)));
    let lo = mean(loops.values().map(|l| success(&l.improved_bin1, TaskId::BeltSort)));
    verdict(hi >= lo + 0.10, format!("belt-sort bin n {:.1}% vs bin 1 {:.1}%", 100.0 * hi, 100.0 * lo))
}

fn arm_mean(loops: &BTreeMap<u64, LoopRun>, name: &str) -> Option<f64> {
    let v: Option<Vec<f64>> = loops.values().map(|l| l.arms.get(name).map(|a| a.mean().success_rate)).collect();
    v.map(mean)
}

fn c11_offline_ratio(shared: &mut Shared) -> Verdict {
    let base = RunConfig::default();
    let names: Vec<String> =
        ablation_arms(AblationAxis::OfflineRatio, &base.improve, base.advantage.n_bins).into_iter().map(|a| a.name).collect();
    let loops = shared.loops();
    let vals: Vec<Option<f64>> = names.iter().map(|n| arm_mean(loops, n)).collect();
    let ran = vals.iter().all(Option::is_some);
    let get = |n: &str| names.iter().position(|x| x == n).and_then(|i| vals[i]).unwrap_or(f64::NAN);
    let (lo, mid) = (get("rho=0.1"), get("rho=0.6"));
    let table: Vec<String> = names.iter().zip(&vals).map(|(n, v)| format!("{n}: {:.1}%", 100.0 * v.unwrap_or(f64::NAN))).collect();
    verdict(ran && lo < mid, table.join(", "))
}

fn c12_online_toggles(shared: &mut Shared) -> Verdict {
    let base = RunConfig::default();
    let names: Vec<String> =
        ablation_arms(AblationAxis::OnlineToggles, &base.improve, base.advantage.n_bins).into_iter().map(|a| a.name).collect();
    let loops = shared.loops();
    let vals: Vec<Option<f64>> = names.iter().map(|n| arm_mean(loops, n)).collect();
    let ran = vals.len() == 3 && vals.iter().all(Option::is_some);
    let (none, both) = (vals[0].unwrap_or(f64::NAN), vals[2].unwrap_or(f64::NAN));
    let table: Vec<String> = names.iter().zip(&vals).map(|(n, v)| format!("{n}: {:.1}%", 100.0 * v.unwrap_or(f64::NAN))).collect();
    verdict(ran && both >= none, table.join(", "))
}

fn c13_no_contact(shared: &mut Shared) -> Verdict {
    let loops = shared.loops();
    let calls: u64 = loops.values().map(|l| l.step_calls).sum();
    verdict(calls == 0, format!("{calls} simulator step calls inside {} loop runs", loops.len()))
}

fn pipeline_once(config: &RunConfig, dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let run = Run::new(config.clone(), Some(dir)).expect("run");
    run.gen_data(false).expect("gen-data");
    run.train_dynamics(false).expect("train-dynamics");
    run.train_value(false).expect("train-value");
    run.warmup(false).expect("warmup");
    run.improve(false).expect("improve");
    run.eval(None, false).expect("eval");
    let mut files = BTreeMap::new();
    for sub in ["metrics", "eval"] {
        for e in std::fs::read_dir(dir.join(sub)).expect("metrics dir") {
            let p = e.expect("entry").path();
            files.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).expect("read"));
        }
    }
    files
}

fn c14_reproducible() -> Verdict {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")).expect("smoke config");
    let config = RunConfig::from_json(&text).expect("smoke config parses");
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let fa = pipeline_once(&config, a.path());
    let fb = pipeline_once(&config, b.path());
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    verdict(
        fa.keys().eq(fb.keys()) && differing.is_empty() && !fa.is_empty(),
        format!("{} metric/report files compared, {} differ", fa.len(), differing.len()),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("RISE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    type Check = Box<dyn Fn(&mut Shared) -> Verdict>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "advantage arithmetic", Box::new(|_| c1_advantage())),
        (2, "TD oracle", Box::new(|_| c2_td_oracle())),
        (3, "progress monotonicity", Box::new(c3_progress)),
        (4, "failure sensitivity", Box::new(c4_failure_sensitivity)),
        (5, "gradient correctness", Box::new(|_| c5_gradients())),
        (6, "dynamics fidelity", Box::new(c6_dynamics)),
        (7, "task-centric batching", Box::new(c7_task_centric)),
        (8, "EMA algebra", Box::new(|_| c8_ema())),
        (9, "end-to-end improvement", Box::new(c9_improvement)),
        (10, "bin contrast", Box::new(c10_bin_contrast)),
        (11, "offline-ratio ablation", Box::new(c11_offline_ratio)),
        (12, "online action/state ablation", Box::new(c12_online_toggles)),
        (13, "no-contact invariant", Box::new(c13_no_contact)),
        (14, "reproducibility", Box::new(|_| c14_reproducible())),
    ];
    let t_all = Instant::now();
    let mut failed = Vec::new();
    for (id, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t0 = Instant::now();
        let v = check(&mut shared);
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name}: {} [{:.1}s]", v.detail, t0.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(*id);
        }
    }
    println!("acceptance: {} failed {:?} in {:.0}s", failed.len(), failed, t_all.elapsed().as_secs_f64());
    if !failed.is_empty() && std::env::var_os("RISE_ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
        std::process::exit(1);
    }
}
