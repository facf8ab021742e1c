//! Traces the interpolation-weight drift of a testing client across rounds.
//! Usage: interp_trace [delta] [gamma] [ft_steps] [rounds]

use refml_core::config::{parse_kv, ExperimentConfig};
use refml_core::eval::accuracy;
use refml_core::fedproto::{make_clients, run_round, CellConfig, GlobalState, Method, Role, RoundContext};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let delta: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let gamma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let ft: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
    let rounds: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(50);

    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    let text = std::fs::read_to_string(path).unwrap();
    let mut cfg = ExperimentConfig::from_pairs(parse_kv(&text).unwrap()).unwrap();
    cfg.hp.delta = delta;
    cfg.hp.gamma = gamma;
    cfg.hp.finetune_steps = ft;
    cfg.hp.alpha = 0.1;
    cfg.hp.beta = 0.1;
    cfg.hp.rounds = rounds;

    let datasets = cfg.load_datasets().unwrap();
    let cell = CellConfig {
        spec: &cfg.arch,
        hp: &cfg.hp,
        method: Method::Refml,
        k_shot: 5,
        q_query: cfg.q_query,
        resample_episodes: true,
        train_datasets: &datasets[1..],
        test_datasets: &datasets[..1],
        master_seed: 42,
    };
    let mut clients = make_clients(&cell).unwrap();
    let w0 = clients[0].local_params.clone();
    let ctx = RoundContext {
        spec: &cfg.arch,
        hp: &cfg.hp,
        method: Method::Refml,
        k_shot: 5,
        q_query: cfg.q_query,
        resample_episodes: true,
    };
    let mut gs = GlobalState { round: 0, global_params: w0 };
    for round in 0..cfg.hp.rounds {
        gs = run_round(&gs, &mut clients, &ctx).unwrap();
        if round % 10 == 9 || round == 0 {
            let tester = clients.iter().find(|c| c.role == Role::Testing).unwrap();
            let (sum, n) = tester.interp.entries().values().fold((0.0, 0usize), |(s, n), t| {
                (s + t.data().iter().sum::<f64>(), n + t.numel())
            });
            let min = tester
                .interp
                .entries()
                .values()
                .flat_map(|t| t.data().iter().copied())
                .fold(f64::INFINITY, f64::min);
            let acc = accuracy(&cfg.arch, &tester.local_params, &tester.query_pool).unwrap();
            println!(
                "round {:3}  mean A {:.4}  min A {:.4}  test acc {:5.1}%",
                round + 1,
                sum / n as f64,
                min,
                acc
            );
        }
    }
}
