//! Pretrain, episodically train, checkpoint, and evaluate a prototypical
//! network on the synthetic benchmark (no domain gap).
//!
//! ```bash
//! cargo run --release --example train_protonet
//! ```

use fewshot::data::{generate_synthetic, GeneratorConfig, SampleFilter, Split};
use fewshot::protonet::{
    episodic_train, evaluate, pretrain_classifier, EvalProtocol, MethodConfig, PretrainConfig,
    ProtoModel, TrainConfig,
};
use fewshot::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = generate_synthetic(&GeneratorConfig {
        domain_gap: 0.0,
        seed: 3,
        ..Default::default()
    })?;
    let base = SampleFilter::split_domain(Split::Base, 0);
    let method = MethodConfig::default();

    let mut model = ProtoModel::new(Default::default(), &mut stream(1, "init", &[]))?;
    println!("pretraining on all base classes...");
    let log = pretrain_classifier(&mut model, &manifest, base, &PretrainConfig::default(), 2)?;
    for (epoch, loss, val) in &log.rows {
        println!("  epoch {epoch}: loss {loss:.4}, val accuracy {val:.3}");
    }

    println!("episodic training (5-way 5-shot)...");
    let train = TrainConfig {
        episodes: 120,
        ..Default::default()
    };
    episodic_train(&mut model, &manifest, base, &method, &train, 4)?;

    let path = std::env::temp_dir().join("fewshot_example_model.fslt");
    model.save(&path)?;
    let restored = ProtoModel::load(&path)?;
    std::fs::remove_file(&path).ok();

    let report = evaluate(
        &restored,
        &manifest,
        SampleFilter::split_domain(Split::Novel, 0),
        &method,
        &EvalProtocol {
            n_episodes: 300,
            ..Default::default()
        },
        5,
    )?;
    println!(
        "novel-class accuracy: {:.3} ± {:.3} over {} episodes",
        report.mean_accuracy, report.ci95, report.n_episodes
    );
    Ok(())
}
