//! Pseudo-label contrastive adaptation: cluster the unlabeled target set
//! with DBSCAN, build the three-family prototype memory, and alternate
//! clustering with contrastive updates. Prints the per-round progress the
//! `fsl train --method contrastive` command writes to rounds.csv.
//!
//! ```bash
//! cargo run --release --example contrastive_adaptation
//! ```

use fewshot::contrastive::{alternating_train, AlternatingConfig};
use fewshot::data::{generate_synthetic, GeneratorConfig, SampleFilter, Split};
use fewshot::protonet::{
    episodic_train, evaluate, pretrain_classifier, EvalProtocol, MethodConfig, PretrainConfig,
    ProtoModel, TrainConfig,
};
use fewshot::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = generate_synthetic(&GeneratorConfig {
        seed: 0,
        ..Default::default()
    })?;
    let method = MethodConfig::default();
    let base = SampleFilter::split_domain(Split::Base, 0);
    let tgt_novel = SampleFilter::split_domain(Split::Novel, 1);
    let proto = EvalProtocol {
        n_episodes: 400,
        ..Default::default()
    };

    println!("training source-only baseline...");
    let mut model = ProtoModel::new(Default::default(), &mut stream(7, "init", &[]))?;
    pretrain_classifier(&mut model, &manifest, base, &PretrainConfig::default(), 11)?;
    episodic_train(
        &mut model,
        &manifest,
        base,
        &method,
        &TrainConfig::default(),
        12,
    )?;
    let before = evaluate(&model, &manifest, tgt_novel, &method, &proto, 13)?;
    println!("target accuracy before adaptation: {:.3}", before.mean_accuracy);

    println!("alternating clustering / contrastive updates...");
    let rounds = alternating_train(&mut model, &manifest, &AlternatingConfig::default(), 21, None)?;
    println!("round  clusters  outliers  loss    monitor");
    for r in &rounds {
        println!(
            "{:>5}  {:>8}  {:>8}  {:.4}  {:.3}",
            r.round, r.n_clusters, r.n_outliers, r.source_loss, r.target_accuracy
        );
    }

    let after = evaluate(&model, &manifest, tgt_novel, &method, &proto, 13)?;
    println!(
        "target accuracy after adaptation: {:.3}  ({:+.1} points)",
        after.mean_accuracy,
        (after.mean_accuracy - before.mean_accuracy) * 100.0
    );
    Ok(())
}
