//! Trains on the synthetic corpus with the simulated generator and compares
//! against random and kNN selection on dev.
//!
//! cargo run --release -p demoselect --example closed_loop -- [dim] [lr] [epochs] [seed]

use std::time::Instant;

use demoselect::corpus::synth_corpus;
use demoselect::encoder::EmbeddingTable;
use demoselect::evaluate::{evaluate_selector, format_table, RewardEnv};
use demoselect::generator::SimGenerator;
use demoselect::prompt::PromptTemplate;
use demoselect::selection::Selector;
use demoselect::trainer::{fit, TrainConfig};

fn main() -> demoselect::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dim: usize = args.get(1).map_or(256, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-3, |s| s.parse().unwrap());
    let epochs: usize = args.get(3).map_or(30, |s| s.parse().unwrap());
    let seed: u64 = args.get(4).map_or(0, |s| s.parse().unwrap());

    let start = Instant::now();
    let split = synth_corpus(seed, 200, 200, 100);
    let table = EmbeddingTable::from_cases(split.all_cases(), dim, seed);
    let template = PromptTemplate::default();
    let sim = SimGenerator::new(&split, &template, seed);
    let env = RewardEnv::new(&split, &template, &sim);
    let cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        early_stop_patience: epochs,
        seed,
        ..TrainConfig::default()
    };
    let result = fit(&env, &table, &cfg)?;
    for h in &result.history {
        println!(
            "epoch {:>2} train {:.4} adv {:+.4} dev {:.4} |g| {:.3}",
            h.epoch, h.train_reward, h.mean_advantage, h.dev_metric, h.grad_norm
        );
    }
    let rows = vec![
        ("Random".to_string(), evaluate_selector(&env, &Selector::Random { seed }, &split.dev, Some(&table), 5, 1)?.mean),
        ("KATE".to_string(), evaluate_selector(&env, &Selector::Knn, &split.dev, Some(&table), 5, 1)?.mean),
        ("Ours".to_string(), evaluate_selector(&env, &Selector::Policy(result.best.params()?), &split.dev, Some(&table), 5, 1)?.mean),
    ];
    print!("{}", format_table(&rows));
    println!("best epoch {} in {:.1?}", result.best.epoch, start.elapsed());
    Ok(())
}
