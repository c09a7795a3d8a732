//! Verify tape gradients against central finite differences for a few
//! representative graphs, including a full episodic loss.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use fewshot::contrastive::{contrastive_loss_batch, PositiveRef, PrototypeMemory};
use fewshot::tensor::{grad_check, Tensor};
use rand::Rng as _;

fn random(rng: &mut fewshot::rng::Rng, shape: &[usize]) -> Tensor {
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = fewshot::rng::stream(42, "gradient-demo", &[]);

    // convolutional block
    let images = random(&mut rng, &[2, 3, 8, 8]);
    let kernel = random(&mut rng, &[4, 3, 3, 3]);
    let err = grad_check(
        |tape, vars| {
            let c = tape.conv2d(vars[0], vars[1], 1, 1)?;
            let n = tape.instance_norm(c)?;
            let r = tape.relu(n)?;
            let p = tape.max_pool2d(r, 2, 2)?;
            let sq = tape.mul(p, p)?;
            tape.sum(sq)
        },
        &[images, kernel],
        1e-5,
    )?;
    println!("conv -> instance-norm -> relu -> pool: max rel error {err:.2e}");

    // episodic classification loss
    let support = random(&mut rng, &[6, 5]);
    let queries = random(&mut rng, &[9, 5]);
    let err = grad_check(
        |tape, vars| {
            let protos = fewshot::protonet::compute_prototypes(tape, vars[0], &[0, 0, 1, 1, 2, 2], 3)?;
            let logits = fewshot::protonet::classify(
                tape,
                vars[1],
                protos,
                fewshot::protonet::Metric::SquaredL2,
            )?;
            tape.cross_entropy(logits, &[0, 1, 2, 0, 1, 2, 0, 1, 2])
        },
        &[support, queries],
        1e-5,
    )?;
    println!("prototype + classify + cross-entropy:  max rel error {err:.2e}");

    // the unified contrastive loss against a fixed memory
    let normalize = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let memory = PrototypeMemory {
        class_centroids: vec![normalize(vec![1.0, 0.2, 0.0]), normalize(vec![0.0, 1.0, 0.3])],
        cluster_centroids: vec![normalize(vec![0.5, 0.5, 0.5])],
        outliers: vec![normalize(vec![-1.0, 0.1, 0.2]), normalize(vec![0.2, -1.0, 0.4])],
        tau: 0.05,
        dim: 3,
    };
    let features = random(&mut rng, &[2, 3]);
    let err = grad_check(
        |tape, vars| {
            let unit = tape.l2_normalize_rows(vars[0])?;
            match contrastive_loss_batch(
                tape,
                unit,
                &[PositiveRef::SourceClass(0), PositiveRef::Cluster(0)],
                &memory,
            ) {
                Ok(v) => Ok(v),
                Err(fewshot::Error::Tensor(e)) => Err(e),
                Err(e) => panic!("unexpected error: {e}"),
            }
        },
        &[features],
        1e-5,
    )?;
    println!("unified contrastive loss:              max rel error {err:.2e}");
    Ok(())
}
