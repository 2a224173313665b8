use nmrl::agent::{simulate, Init};
use nmrl::decomp::{decompose, omega_step, zeta_stationary_mean, HistoryModel};
use nmrl::oracle::{poisson_basis, JointChainOracle, PoissonPath, PoissonSolution, StationarySolver};
use nmrl::presets::Preset;
use nmrl::qlearn::QTable;
use nmrl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ERGODIC: [&str; 5] = ["markov-consistent", "hmm2-window1", "hmm3-window2", "iid-window1", "cme-sticky3"];

fn random_q(oracle: &JointChainOracle, gamma: f64, rng: &mut ChaCha8Rng) -> QTable {
    let sp = oracle.model().spaces();
    let hi = 1.0 / (1.0 - gamma);
    let vals = (0..sp.n_cells()).map(|_| rng.random_range(0.0..hi)).collect();
    QTable::from_values(sp.n_agent, sp.n_act, gamma, vals).unwrap()
}

#[test]
fn copy_process_has_no_unique_stationary_law() {
    let p = Preset::load("copy-process").unwrap();
    assert!(matches!(JointChainOracle::build(&p.model), Err(Error::ChainRejected(_))));
}

#[test]
fn direct_and_power_solvers_agree() {
    for name in ERGODIC {
        let p = Preset::load(name).unwrap();
        let a = JointChainOracle::build_with(&p.model, StationarySolver::Direct, 1e-6).unwrap();
        let b = JointChainOracle::build_with(&p.model, StationarySolver::Power { tolerance: 1e-14 }, 1e-6).unwrap();
        let gap = a.stationary().iter().zip(b.stationary()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-10, "{name}: {gap:e}");
        assert!(a.chain().stationarity_residual(a.stationary()) < 1e-12);
    }
}

#[test]
fn cell_frequencies_match_pi_tilde() {
    let p = Preset::load("hmm2-window1").unwrap();
    let oracle = JointChainOracle::build(&p.model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let traj = simulate(&p.model, 400_000, Init::Joint(oracle.stationary()), &mut rng).unwrap();
    let mut freq = vec![0.0; oracle.n_cells()];
    for st in &traj.steps {
        freq[p.model.cell(st.s, st.u)] += 1.0 / traj.steps.len() as f64;
    }
    for (c, (f, pt)) in freq.iter().zip(oracle.pi_tilde()).enumerate() {
        assert!((f - pt).abs() < 0.01, "cell {c}: {f} vs {pt}");
    }
}

#[test]
fn qstar_is_a_fixed_point_and_equals_the_history_average() {
    for name in ERGODIC {
        let p = Preset::load(name).unwrap();
        let oracle = JointChainOracle::build(&p.model).unwrap();
        let q = oracle.fixed_point_qstar(p.gamma).unwrap();
        assert!(oracle.bellman_residual(&q) <= 1e-12, "{name}");
        let singh = oracle.singh_limit(p.gamma).unwrap();
        assert!(q.distance(&singh) <= 1e-8, "{name}: {:e}", q.distance(&singh));
    }
}

#[test]
fn poisson_solution_is_exact_and_pinned() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in ERGODIC {
        let p = Preset::load(name).unwrap();
        let oracle = JointChainOracle::build(&p.model).unwrap();
        let w2 = poisson_basis(oracle.psi(), oracle.pi_tilde(), PoissonPath::Fundamental).unwrap();
        for _ in 0..5 {
            let q = random_q(&oracle, p.gamma, &mut rng);
            let sol = oracle.poisson_solve(&q);
            assert!(sol.residual(oracle.psi(), oracle.pi_tilde()) <= 1e-9, "{name}");
            assert!(sol.value(sol.z0).iter().all(|v| *v == 0.0));
            let alt = PoissonSolution { basis: w2.clone(), ..sol.clone() };
            for z in 0..oracle.n_cells() {
                for (a, b) in sol.value(z).iter().zip(alt.value(z)) {
                    assert!((a - b).abs() <= 1e-8, "{name}");
                }
            }
        }
    }
}

#[test]
fn zeta_has_stationary_mean_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["hmm2-window1", "hmm3-window2"] {
        let p = Preset::load(name).unwrap();
        let oracle = JointChainOracle::build(&p.model).unwrap();
        for _ in 0..5 {
            let q = random_q(&oracle, p.gamma, &mut rng);
            for how in [HistoryModel::JointState, HistoryModel::GammaPosterior, HistoryModel::Paths(4)] {
                let mean = zeta_stationary_mean(&oracle, &q, how);
                assert!(mean.iter().all(|m| m.abs() <= 1e-8), "{name} {how:?}: {mean:?}");
            }
        }
    }
}

#[test]
fn markov_consistent_offsets_vanish() {
    let p = Preset::load("markov-consistent").unwrap();
    let oracle = JointChainOracle::build(&p.model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_q(&oracle, p.gamma, &mut rng);
    let f = oracle.f_values(&q);
    let traj = simulate(&p.model, 10_000, Init::Joint(oracle.stationary()), &mut rng).unwrap();
    for st in &traj.steps {
        assert!(decompose(&oracle, st, &q).zeta.abs() <= 1e-12);
        assert!(omega_step(&oracle, &f, &st.belief, st.gamma, st.u).iter().all(|w| w.abs() <= 1e-12));
    }
}

#[test]
fn window_history_differs_from_agent_state() {
    let p = Preset::load("hmm2-window1").unwrap();
    let oracle = JointChainOracle::build(&p.model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = oracle.fixed_point_qstar(p.gamma).unwrap();
    let traj = simulate(&p.model, 2_000, Init::Joint(oracle.stationary()), &mut rng).unwrap();
    let worst = traj.steps.iter().map(|st| decompose(&oracle, st, &q).zeta.abs()).fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");
}
