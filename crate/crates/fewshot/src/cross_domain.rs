//! Cross-domain stylization: transfer unlabeled-target style onto labeled
//! source images, then train on the union of originals and stylized copies.
//!
//! The default stylizer works directly on pixel channel statistics (AdaIN at
//! pixel level) — no pretrained weights anywhere, and exactly the statistic
//! family the synthetic generator uses to define domains. A feature-space
//! variant backed by a small autoencoder trained on the unlabeled target set
//! sits behind [`StylizeSpace::Feature`].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::{DataError, DatasetManifest, SampleFilter, SampleRecord, Split};
use crate::protonet::{
    episodic_train, pretrain_classifier, MethodConfig, PretrainConfig, ProtoModel, TrainConfig,
    TrainLog,
};
use crate::rng::{stream, Rng};
use crate::stylemix::adain;
use crate::tensor::{SgdOptimizer, Tape, Tensor, TensorError, Var};
use crate::Result;

/// Blend `content` toward `style`'s per-channel statistics at pixel level.
/// `out = (1-coefficient)·content + coefficient·adain(content, style)`,
/// clamped to [0, 1] as the final step (the statistics contract holds
/// pre-clamp). Inputs are C×H×W images.
pub fn stylize_image(content: &Tensor, style: &Tensor, coefficient: f64) -> Result<Tensor> {
    let styled = stylize_image_preclamp(content, style, coefficient)?;
    Ok(styled.clamp(0.0, 1.0))
}

/// Same as [`stylize_image`] without the final clamp.
pub fn stylize_image_preclamp(
    content: &Tensor,
    style: &Tensor,
    coefficient: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&coefficient) {
        return Err(TensorError::BadParameter {
            op: "stylize_image",
            detail: format!("coefficient must be in [0, 1], got {coefficient}"),
        }
        .into());
    }
    if content.rank() != 3 || style.rank() != 3 || content.shape()[0] != style.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "stylize_image",
            left: content.shape().to_vec(),
            right: style.shape().to_vec(),
        }
        .into());
    }
    let as4 = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshaped(shape)
    };
    let styled4 = adain(&as4(content)?, &as4(style)?)?;
    let data: Vec<f64> = content
        .data()
        .iter()
        .zip(styled4.data())
        .map(|(&c, &s)| (1.0 - coefficient) * c + coefficient * s)
        .collect();
    Ok(Tensor::new(content.shape().to_vec(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StylizeSpace {
    Pixel,
    Feature,
}

impl StylizeSpace {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pixel" => Some(Self::Pixel),
            "feature" => Some(Self::Feature),
            _ => None,
        }
    }
}

/// One stylization pass: which samples provide content, which provide style,
/// how strongly, and under which seed the pairing is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct StylizationJob {
    pub source_filter: SampleFilter,
    pub style_filter: SampleFilter,
    /// Blend strength in [0, 1]; 1.0 replaces the source style entirely.
    pub coefficient: f64,
    pub seed: u64,
    pub space: StylizeSpace,
    /// Stylized copies per source image.
    pub copies: usize,
}

impl Default for StylizationJob {
    fn default() -> Self {
        StylizationJob {
            source_filter: SampleFilter::role(crate::data::Role::LabeledSource),
            style_filter: SampleFilter::role(crate::data::Role::UnlabeledTarget),
            coefficient: 1.0,
            seed: 0,
            space: StylizeSpace::Pixel,
            copies: 1,
        }
    }
}

/// The deterministic content/style pairing a job induces: every source
/// sample gets `copies` uniformly drawn partners from the style pool.
pub fn stylize_pairing(
    manifest: &DatasetManifest,
    job: &StylizationJob,
) -> Result<Vec<(usize, usize)>> {
    let source = manifest.select(job.source_filter);
    let style_pool = manifest.select(job.style_filter);
    if source.is_empty() {
        return Err(DataError::Invalid("stylization source set is empty".into()).into());
    }
    if style_pool.is_empty() {
        return Err(DataError::Invalid("stylization style set is empty".into()).into());
    }
    if job.copies == 0 {
        return Err(DataError::Invalid("stylize copies must be at least 1".into()).into());
    }
    let mut pairing = Vec::with_capacity(source.len() * job.copies);
    for copy in 0..job.copies {
        for (i, &src_idx) in source.iter().enumerate() {
            let mut rng = stream(job.seed, "stylize-pair", &[copy as u64, i as u64]);
            pairing.push((src_idx, style_pool[rng.gen_range(0..style_pool.len())]));
        }
    }
    Ok(pairing)
}

/// Stylize every source sample against one uniformly drawn style partner.
/// Output manifest: one stylized copy per source image, source labels kept,
/// partner's domain tag carried.
pub fn stylize_dataset(manifest: &DatasetManifest, job: &StylizationJob) -> Result<DatasetManifest> {
    let pairing = stylize_pairing(manifest, job)?;
    let autoencoder = match job.space {
        StylizeSpace::Pixel => None,
        StylizeSpace::Feature => Some(train_autoencoder(
            manifest,
            job.style_filter,
            &AutoencoderConfig::default(),
            job.seed,
        )?),
    };
    let mut samples = Vec::with_capacity(pairing.len());
    for &(src_idx, style_idx) in &pairing {
        let src = &manifest.samples[src_idx];
        let sty = &manifest.samples[style_idx];
        let image = match &autoencoder {
            None => stylize_image(&src.image, &sty.image, job.coefficient)?,
            Some(ae) => ae.stylize(&src.image, &sty.image, job.coefficient)?,
        };
        samples.push(SampleRecord {
            image,
            class_id: src.class_id,
            domain_id: sty.domain_id,
            role: src.role,
        });
    }
    Ok(DatasetManifest {
        samples,
        class_names: manifest.class_names.clone(),
        domain_names: manifest.domain_names.clone(),
        split_map: manifest.split_map.clone(),
    })
}

/// Full stylized-training pipeline: pretrain then episodically train on the
/// union of original source samples and their stylized copies. An empty
/// stylized manifest reduces to plain source-only training.
pub fn train_stylized(
    model: &mut ProtoModel,
    source: &DatasetManifest,
    stylized: &DatasetManifest,
    method: &MethodConfig,
    pretrain: &PretrainConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let union = source.merged_with(stylized)?;
    let filter = SampleFilter {
        split: Some(Split::Base),
        domain: None,
        role: Some(crate::data::Role::LabeledSource),
    };
    let mut log = pretrain_classifier(model, &union, filter, pretrain, seed)?;
    let episodic = episodic_train(model, &union, filter, method, train, seed)?;
    log.rows.extend(episodic.rows);
    Ok(log)
}

// ── Feature-space variant ────────────────────────────────────────────

/// Small conv autoencoder trained on the unlabeled target set, used to move
/// the AdaIN step into feature space.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    enc1: Tensor,
    enc2: Tensor,
    dec1: Tensor,
    dec2: Tensor,
    channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            channels: 10,
            epochs: 30,
            batch_size: 16,
            lr: 0.05,
        }
    }
}

impl Autoencoder {
    fn bind(&self, tape: &mut Tape, trainable: bool) -> [Var; 4] {
        [
            tape.leaf(self.enc1.clone().with_requires_grad(trainable)),
            tape.leaf(self.enc2.clone().with_requires_grad(trainable)),
            tape.leaf(self.dec1.clone().with_requires_grad(trainable)),
            tape.leaf(self.dec2.clone().with_requires_grad(trainable)),
        ]
    }

    fn encode(tape: &mut Tape, vars: &[Var; 4], images: Var) -> crate::tensor::Result<Var> {
        let x = tape.conv2d(images, vars[0], 1, 1)?;
        let x = tape.relu(x)?;
        let x = tape.max_pool2d(x, 2, 2)?;
        let x = tape.conv2d(x, vars[1], 1, 1)?;
        tape.relu(x)
    }

    fn decode(tape: &mut Tape, vars: &[Var; 4], features: Var) -> crate::tensor::Result<Var> {
        let x = tape.conv2d(features, vars[2], 1, 1)?;
        let x = tape.relu(x)?;
        let x = tape.upsample_nearest2d(x, 2)?;
        tape.conv2d(x, vars[3], 1, 1)
    }

    /// Stylize by blending the decoded AdaIN-transferred features into the
    /// content image; coefficient 0 returns the content exactly.
    pub fn stylize(&self, content: &Tensor, style: &Tensor, coefficient: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&coefficient) {
            return Err(TensorError::BadParameter {
                op: "stylize_image",
                detail: format!("coefficient must be in [0, 1], got {coefficient}"),
            }
            .into());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let as4 = |t: &Tensor| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshaped(shape)
        };
        let c4 = tape.constant(as4(content)?);
        let s4 = tape.constant(as4(style)?);
        let fc = Self::encode(&mut tape, &vars, c4)?;
        let fs = Self::encode(&mut tape, &vars, s4)?;
        let transferred = adain(tape.value(fc), tape.value(fs))?;
        let tv = tape.constant(transferred);
        let decoded = Self::decode(&mut tape, &vars, tv)?;
        let out = tape.value(decoded);
        let data: Vec<f64> = content
            .data()
            .iter()
            .zip(out.data())
            .map(|(&c, &d)| (1.0 - coefficient) * c + coefficient * d)
            .collect();
        Ok(Tensor::new(content.shape().to_vec(), data)?.clamp(0.0, 1.0))
    }
}

/// Train the autoencoder on reconstruction (mean squared error) over the
/// samples selected by `filter`.
pub fn train_autoencoder(
    manifest: &DatasetManifest,
    filter: SampleFilter,
    config: &AutoencoderConfig,
    seed: u64,
) -> Result<Autoencoder> {
    let pool = manifest.select(filter);
    if pool.is_empty() {
        return Err(DataError::Invalid("autoencoder training set is empty".into()).into());
    }
    let (c_in, _, _) = manifest.image_shape();
    let mut init = stream(seed, "ae-init", &[]);
    let conv = |rng: &mut Rng, co: usize, ci: usize| -> crate::tensor::Result<Tensor> {
        let std = (2.0 / (ci * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid normal");
        Tensor::new(
            vec![co, ci, 3, 3],
            (0..co * ci * 9).map(|_| normal.sample(rng)).collect(),
        )
    };
    let ch = config.channels;
    let mut ae = Autoencoder {
        enc1: conv(&mut init, ch, c_in)?,
        enc2: conv(&mut init, ch, ch)?,
        dec1: conv(&mut init, ch, ch)?,
        dec2: conv(&mut init, c_in, ch)?,
        channels: ch,
    };
    let mut optimizer = SgdOptimizer::new(config.lr, 0.9)?;
    for epoch in 0..config.epochs {
        let mut order = pool.clone();
        let mut rng = stream(seed, "ae-shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = ae.bind(&mut tape, true);
            let images = tape.constant(manifest.gather_images(chunk));
            let encoded = Autoencoder::encode(&mut tape, &vars, images)?;
            let decoded = Autoencoder::decode(&mut tape, &vars, encoded)?;
            let diff = tape.sub(decoded, images)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean_all(sq)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| {
                    Ok(match tape.grad(v)? {
                        Some(g) => g,
                        None => Tensor::zeros(tape.value(v).shape().to_vec()),
                    })
                })
                .collect::<crate::tensor::Result<_>>()?;
            let mut params = vec![
                ae.enc1.clone(),
                ae.enc2.clone(),
                ae.dec1.clone(),
                ae.dec2.clone(),
            ];
            optimizer.step(&mut params, &grads)?;
            ae.dec2 = params.pop().expect("dec2");
            ae.dec1 = params.pop().expect("dec1");
            ae.enc2 = params.pop().expect("enc2");
            ae.enc1 = params.pop().expect("enc1");
        }
    }
    Ok(ae)
}

/// Mean reconstruction error of the autoencoder over a sample set.
pub fn reconstruction_mse(
    ae: &Autoencoder,
    manifest: &DatasetManifest,
    filter: SampleFilter,
) -> Result<f64> {
    let pool = manifest.select(filter);
    if pool.is_empty() {
        return Err(DataError::Invalid("empty evaluation set".into()).into());
    }
    let mut tape = Tape::new();
    let vars = ae.bind(&mut tape, false);
    let images = tape.constant(manifest.gather_images(&pool));
    let encoded = Autoencoder::encode(&mut tape, &vars, images)?;
    let decoded = Autoencoder::decode(&mut tape, &vars, encoded)?;
    let diff = tape.sub(decoded, images)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean_all(sq)?;
    Ok(tape.value(loss).item())
}

impl Autoencoder {
    pub fn channels(&self) -> usize {
        self.channels
    }
}
