use npd_core::data::{generate_offline_dataset, LoggingDistribution};
use npd_core::dp::value_iteration_optimal;
use npd_core::generators::{random_mdp, random_reward, RandomMdpSpec};
use npd_core::mdp::{RewardTable, TabularMdp};
use npd_core::oracle::enumerate_policies_oracle;
use npd_core::pipeline::{learn, RunConfig};
use npd_core::rng::RngSeed;
use npd_core::sparsify::PhiRule;

#[test]
fn pipeline_runs_in_f32() {
    let m: TabularMdp<f32> = random_mdp(&RandomMdpSpec::new(3, 2, 3, 8));
    let mu = LoggingDistribution::<f32>::uniform(3, 2);
    let cfg = RunConfig { phi: PhiRule::Fixed(30), ..RunConfig::new(64, 1) };
    let learned = learn(&m, &mu, 2000, &cfg).unwrap();
    let r: RewardTable<f32> = random_reward(3, 2, 4);
    let pi = learned.plan(&r).unwrap();
    assert_eq!(pi.horizon(), 3);
    assert_eq!(pi.num_states(), 3);
}

#[test]
fn f32_and_f64_planners_agree() {
    let spec = RandomMdpSpec::new(4, 3, 3, 21);
    let (m32, m64) = (random_mdp::<f32>(&spec), random_mdp::<f64>(&spec));
    let (r32, r64) = (random_reward::<f32>(4, 3, 5), random_reward::<f64>(4, 3, 5));
    let (_, v32) = value_iteration_optimal(&m32.kernel, &r32, 3).unwrap();
    let (_, v64) = value_iteration_optimal(&m64.kernel, &r64, 3).unwrap();
    assert!((f64::from(v32.v(0, 0)) - v64.v(0, 0)).abs() < 1e-5);
    let oracle = enumerate_policies_oracle(&m32.kernel, &r32, 3, 0).unwrap();
    assert!((oracle.value - v32.v(0, 0)).abs() < 1e-5);
}

#[test]
fn same_seed_same_dataset_across_precisions() {
    let spec = RandomMdpSpec::new(3, 2, 2, 2);
    let d32 = generate_offline_dataset(&random_mdp::<f32>(&spec), &LoggingDistribution::uniform(3, 2), 500, RngSeed::new(1, 0)).unwrap();
    let d64 = generate_offline_dataset(&random_mdp::<f64>(&spec), &LoggingDistribution::uniform(3, 2), 500, RngSeed::new(1, 0)).unwrap();
    let agree = d32.triples.iter().zip(&d64.triples).filter(|(a, b)| a == b).count();
    // rounding can move a draw across a row boundary, but only rarely
    assert!(agree >= 495, "{agree}/500");
}
