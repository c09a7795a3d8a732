//! Training-pipeline behavior: the pretraining margin, the cross-episode
//! StyleMix scope, learned attention projections, and the evaluation
//! accounting under a perfect classifier.

use fewshot::attention::{AttentionConfig, AttentionMode};
use fewshot::data::{
    generate_synthetic, DatasetManifest, GeneratorConfig, Role, SampleFilter, SampleRecord, Split,
};
use fewshot::protonet::{
    episodic_train, evaluate, pretrain_classifier, EmbedderConfig, EvalProtocol, MethodConfig,
    PretrainConfig, ProtoModel, StyleMixPlan, TrainConfig,
};
use fewshot::rng::stream;
use fewshot::stylemix::{MixConfig, PartnerScope};
use fewshot::tensor::Tensor;

#[test]
fn pretraining_then_episodic_beats_episodic_only() {
    let manifest = generate_synthetic(&GeneratorConfig {
        seed: 1,
        domain_gap: 0.0,
        ..Default::default()
    })
    .unwrap();
    let method = MethodConfig::default();
    let base = SampleFilter::split_domain(Split::Base, 0);
    let train = TrainConfig {
        episodes: 160,
        ..Default::default()
    };
    let proto = EvalProtocol {
        n_episodes: 300,
        ..Default::default()
    };
    let novel = SampleFilter::split_domain(Split::Novel, 0);

    let mut with_pretrain = ProtoModel::new(Default::default(), &mut stream(7, "init", &[])).unwrap();
    pretrain_classifier(
        &mut with_pretrain,
        &manifest,
        base,
        &PretrainConfig::default(),
        11,
    )
    .unwrap();
    episodic_train(&mut with_pretrain, &manifest, base, &method, &train, 12).unwrap();
    let pretrained = evaluate(&with_pretrain, &manifest, novel, &method, &proto, 13).unwrap();

    let mut episodic_only =
        ProtoModel::new(Default::default(), &mut stream(7, "init", &[])).unwrap();
    episodic_train(&mut episodic_only, &manifest, base, &method, &train, 12).unwrap();
    let plain = evaluate(&episodic_only, &manifest, novel, &method, &proto, 13).unwrap();

    assert!(
        pretrained.mean_accuracy >= plain.mean_accuracy,
        "pretraining should not hurt: {:.4} (pretrain+episodic) vs {:.4} (episodic only)",
        pretrained.mean_accuracy,
        plain.mean_accuracy
    );
}

#[test]
fn cross_episode_stylemix_trains_on_double_episode_batches() {
    let manifest = generate_synthetic(&GeneratorConfig {
        seed: 2,
        n_classes: 8,
        samples_per_class: 24,
        base_classes: 6,
        val_classes: 1,
        novel_classes: 1,
        ..Default::default()
    })
    .unwrap();
    let method = MethodConfig {
        stylemix: Some(StyleMixPlan {
            mix: MixConfig {
                alpha: 0.3,
                p: 0.7,
                scope: PartnerScope::CrossEpisode,
            },
            slots: vec![0],
        }),
        ..Default::default()
    };
    let mut model = ProtoModel::new(Default::default(), &mut stream(3, "init", &[])).unwrap();
    let before = model.weights[0].data().to_vec();
    episodic_train(
        &mut model,
        &manifest,
        SampleFilter::split_domain(Split::Base, 0),
        &method,
        &TrainConfig {
            episodes: 6,
            n_way: 3,
            k_shot: 2,
            q_queries: 4,
            double_episode: true,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    assert_ne!(before, model.weights[0].data(), "training must update weights");
}

#[test]
fn learned_attention_projections_receive_gradients() {
    let manifest = generate_synthetic(&GeneratorConfig {
        seed: 5,
        n_classes: 6,
        samples_per_class: 16,
        base_classes: 4,
        val_classes: 1,
        novel_classes: 1,
        ..Default::default()
    })
    .unwrap();
    let (_, h, w) = manifest.image_shape();
    let config = EmbedderConfig::default();
    let d = config.feature_dim(h, w);
    let mut model = ProtoModel::new(config, &mut stream(6, "init", &[]))
        .unwrap()
        .with_learned_projections(d, &mut stream(6, "proj", &[]))
        .unwrap();
    let before = model.attn_proj.as_ref().unwrap()[0].data().to_vec();
    let method = MethodConfig {
        attention: Some(AttentionConfig {
            mode: AttentionMode::Prototypes,
            slots: Vec::new(),
            learned_projections: true,
        }),
        ..Default::default()
    };
    episodic_train(
        &mut model,
        &manifest,
        SampleFilter::split_domain(Split::Base, 0),
        &method,
        &TrainConfig {
            episodes: 4,
            n_way: 3,
            k_shot: 2,
            q_queries: 4,
            ..Default::default()
        },
        7,
    )
    .unwrap();
    let after = model.attn_proj.as_ref().unwrap()[0].data();
    assert_ne!(before, after, "projection weights must move");
}

/// A dataset whose classes are distinct constant images makes every query
/// identical to its class prototype; a style-sensitive embedder preserves
/// that separation, so evaluation must report exactly 1.0.
#[test]
fn perfect_separability_reports_accuracy_one() {
    let mut samples = Vec::new();
    for class_id in 0..5 {
        for _ in 0..12 {
            let value = 0.1 + class_id as f64 * 0.2;
            samples.push(SampleRecord {
                image: Tensor::full(vec![3, 16, 16], value),
                class_id,
                domain_id: 0,
                role: Role::LabeledSource,
            });
        }
    }
    let manifest = DatasetManifest {
        samples,
        class_names: (0..5).map(|c| format!("c{c}")).collect(),
        domain_names: vec!["source".into()],
        split_map: vec![Split::Base; 5],
    };
    let config = EmbedderConfig {
        instance_norm: false,
        ..Default::default()
    };
    let model = ProtoModel::new(config, &mut stream(8, "init", &[])).unwrap();
    let report = evaluate(
        &model,
        &manifest,
        SampleFilter::split(Split::Base),
        &MethodConfig::default(),
        &EvalProtocol {
            n_way: 5,
            k_shot: 3,
            q_queries: 5,
            n_episodes: 50,
        },
        9,
    )
    .unwrap();
    assert_eq!(report.mean_accuracy, 1.0);
    assert_eq!(report.ci95, 0.0);
}
