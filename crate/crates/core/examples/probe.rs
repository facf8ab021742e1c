//! Calibration probe for the desk benchmark: centralized cross-condition
//! transfer vs few-shot local training.
//! Usage: probe [eta] [steps] [noise_base] [wpc] [spread]

use refml_core::data::{generate_synthetic, split_support_pool, Condition, SyntheticConfig};
use refml_core::eval::accuracy;
use refml_core::fedproto::fedavg_local;
use refml_core::model::{build, ArchitectureSpec, ConvUnit};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let eta: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let wpc: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(12);
    let spread: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.1);

    let spec = ArchitectureSpec {
        input_length: 256,
        num_classes: 4,
        conv_units: vec![
            ConvUnit { out_channels: 4, kernel: 3, pool: 2 },
            ConvUnit { out_channels: 8, kernel: 3, pool: 2 },
            ConvUnit { out_channels: 8, kernel: 3, pool: 2 },
        ],
        hidden_dim: 64,
    };
    let cfg = SyntheticConfig {
        num_classes: 4,
        conditions: vec![
            Condition { speed_factor: 1.0, noise_std: noise, amplitude_scale: 1.0 },
            Condition { speed_factor: 1.0 - spread, noise_std: noise + 0.2, amplitude_scale: 0.8 },
            Condition { speed_factor: 1.0 + spread, noise_std: noise + 0.4, amplitude_scale: 1.2 },
            Condition { speed_factor: 1.0 - 2.0 * spread, noise_std: noise + 0.6, amplitude_scale: 0.65 },
        ],
        windows_per_class: wpc,
        input_length: 256,
        seed: 1,
    };
    let datasets = generate_synthetic(&cfg).unwrap();

    let mut train = Vec::new();
    for ds in &datasets[1..] {
        train.extend(ds.windows.iter().cloned());
    }
    let held = &datasets[0];

    // Centralized transfer: train on conditions 1..3, evaluate on 0.
    let mut params = build(&spec, 7).unwrap();
    for _ in 0..steps {
        params = fedavg_local(&spec, &params, &train, eta, 1).unwrap();
    }
    let train_acc = accuracy(&spec, &params, &train).unwrap();
    let transfer = accuracy(&spec, &params, &held.windows).unwrap();

    // Few-shot fine-tune of the transferred model on K=5 support.
    let (support, pool) = split_support_pool(held, 4, 5, 99).unwrap();
    let mut tuned = params.clone();
    for _ in 0..10 {
        tuned = fedavg_local(&spec, &tuned, &support, eta, 1).unwrap();
    }
    let tuned_acc = accuracy(&spec, &tuned, &pool).unwrap();

    // Local-only: fresh model trained on the K=5 support alone.
    for (k, ft_steps) in [(1usize, 100usize), (5, 100)] {
        let (sup, pool) = split_support_pool(held, 4, k, 99).unwrap();
        let mut local = build(&spec, 7).unwrap();
        for _ in 0..ft_steps {
            local = fedavg_local(&spec, &local, &sup, eta, 1).unwrap();
        }
        let local_acc = accuracy(&spec, &local, &pool).unwrap();
        println!("local K={k}: {local_acc:6.2}% on pool");
    }

    println!("train {train_acc:6.2}%  transfer {transfer:6.2}%  transfer+FT(5shot) {tuned_acc:6.2}%");
}
