//! Spatial attention over episode feature maps: the three refinement modes
//! compared on the same training setup.
//!
//! ```bash
//! cargo run --release --example attention_modes
//! ```

use fewshot::attention::{AttentionConfig, AttentionMode};
use fewshot::data::{generate_synthetic, GeneratorConfig, SampleFilter, Split};
use fewshot::protonet::{
    episodic_train, evaluate, pretrain_classifier, EvalProtocol, MethodConfig, PretrainConfig,
    ProtoModel, TrainConfig,
};
use fewshot::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = generate_synthetic(&GeneratorConfig {
        domain_gap: 0.0,
        seed: 11,
        ..Default::default()
    })?;
    let base = SampleFilter::split_domain(Split::Base, 0);
    let novel = SampleFilter::split_domain(Split::Novel, 0);
    let proto = EvalProtocol {
        n_episodes: 200,
        ..Default::default()
    };

    let modes: [(&str, Option<AttentionMode>); 4] = [
        ("plain protonet", None),
        ("class-support attention", Some(AttentionMode::ClassSupport)),
        ("prototype attention", Some(AttentionMode::Prototypes)),
        ("query-prototype attention", Some(AttentionMode::QueryPrototype)),
    ];
    for (name, mode) in modes {
        let method = MethodConfig {
            attention: mode.map(|mode| AttentionConfig {
                mode,
                slots: Vec::new(),
                learned_projections: false,
            }),
            ..Default::default()
        };
        let mut model = ProtoModel::new(Default::default(), &mut stream(1, "init", &[]))?;
        pretrain_classifier(&mut model, &manifest, base, &PretrainConfig::default(), 2)?;
        episodic_train(
            &mut model,
            &manifest,
            base,
            &method,
            &TrainConfig {
                episodes: 80,
                ..Default::default()
            },
            3,
        )?;
        let report = evaluate(&model, &manifest, novel, &method, &proto, 4)?;
        println!(
            "{name:>28}: {:.3} ± {:.3}",
            report.mean_accuracy, report.ci95
        );
    }
    Ok(())
}
