//! Generate a multi-domain synthetic dataset, write it to disk, and read it
//! back.
//!
//! ```bash
//! cargo run --release --example generate_dataset
//! ```

use fewshot::data::{
    generate_synthetic, load_dataset, save_dataset, GeneratorConfig, Role, SampleFilter,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = GeneratorConfig {
        seed: 7,
        ..Default::default()
    };
    let manifest = generate_synthetic(&config)?;
    println!(
        "generated {} samples: {} classes x {} domains x {} per class",
        manifest.samples.len(),
        manifest.n_classes(),
        manifest.n_domains(),
        config.samples_per_class,
    );
    for role in [Role::LabeledSource, Role::UnlabeledTarget, Role::TestTarget] {
        println!(
            "  {role:?}: {} samples",
            manifest.select(SampleFilter::role(role)).len()
        );
    }

    let path = std::env::temp_dir().join("fewshot_example_dataset.fsld");
    save_dataset(&manifest, &path)?;
    let bytes = std::fs::metadata(&path)?.len();
    let back = load_dataset(&path)?;
    println!(
        "round-trip through {} ({bytes} bytes): identical = {}",
        path.display(),
        back == manifest
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
