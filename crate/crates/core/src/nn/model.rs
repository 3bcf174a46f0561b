//! Backbone assembly, classification head and pair prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{build_attention_input, hard_attention_input, image_tensor};
use super::bottleneck::Bottleneck;
use super::config::{AttentionMode, BackbonePlan, ModelConfig};
use super::layers::{Conv, Linear, Norm};
use super::params::{he_std, Ctx, ParamId, ParamStore, StatsId};
use crate::data::{BinaryMask, RgbImage, SampleRef};
use crate::error::{Error, Result};
use crate::tensor::{BatchMoments, Mode, Scalar, Tape, Tensor, Var};

/// Standard deviation of the output layer's initial weights; keeps a fresh
/// model's predictions close to 0.5.
pub const OUTPUT_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Vec<Linear>,
    pub output: Linear,
    pub dropout: f64,
}

impl Head {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        features: usize,
        widths: &[usize],
        dropout: f64,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut fan_in = features;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(Linear::new(store, rng, &format!("head.fc{}", i + 1), (fan_in, w), he_std(fan_in))?);
            fan_in = w;
        }
        let output = Linear::new(store, rng, "head.output", (fan_in, 1), OUTPUT_INIT_STD)?;
        Ok(Self {
            hidden,
            output,
            dropout,
        })
    }

    /// `N×C` features to `N×1` probabilities.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(&self, cx: &mut Ctx<'_, T, R>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(cx, h)?;
            h = cx.tape.relu(h)?;
            h = cx.tape.dropout(h, self.dropout, cx.mode, &mut *cx.rng)?;
        }
        let logits = self.output.forward(cx, h)?;
        cx.tape.sigmoid(logits)
    }
}

/// Network inputs for a batch, already arranged for the model's mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs<T: Scalar = f32> {
    pub stem: Tensor<T>,
    pub attention: Option<Tensor<T>>,
}

impl<T: Scalar> Inputs<T> {
    pub fn batch_size(&self) -> usize {
        self.stem.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    plan: BackbonePlan,
    store: ParamStore<T>,
    stem: Conv,
    blocks: Vec<Bottleneck>,
    final_norm: Norm,
    head: Head,
}

/// Result of a forward pass.
pub struct Forward<T: Scalar> {
    /// `N×1` probabilities of the worn class.
    pub prob: Var,
    pub moments: Vec<(StatsId, BatchMoments<T>)>,
}

impl<T: Scalar> Model<T> {
    /// Assemble and initialize from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        plan.audit()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let stem = Conv::new(
            &mut store,
            &mut rng,
            "stem",
            (config.attention.stem_channels_in(), config.stem_channels),
            config.stem_kernel,
            config.stem_stride,
        )?;
        let blocks = plan
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| Bottleneck::new(&mut store, &mut rng, &format!("block{}", i + 1), b))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = Norm::new(&mut store, "final_norm", plan.features)?;
        let head = Head::new(&mut store, &mut rng, plan.features, &config.head, config.dropout)?;
        Ok(Self {
            config: config.clone(),
            plan,
            store,
            stem,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &BackbonePlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[Bottleneck] {
        &self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn attention_unit_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.attention.is_some()).count()
    }

    /// Kernel and bias of every attention unit.
    pub fn attention_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter_map(|b| b.attention.as_ref())
            .flat_map(|u| [u.conv.kernel, u.conv.bias])
            .collect()
    }

    /// Zero every attention unit's parameters.
    pub fn zero_attention(&mut self) {
        for id in self.attention_params() {
            for v in self.store.get_mut(id).data_mut() {
                *v = T::zero();
            }
        }
    }

    /// Copy tensors and running stats whose names and shapes match; returns
    /// how many entries were copied.
    pub fn copy_matching(&mut self, other: &Model<T>) -> usize {
        let mut copied = 0;
        let mut tensors = self.store.tensors().to_vec();
        for (i, name) in self.store.names().iter().enumerate() {
            if let Some(j) = other.store.find(name) {
                let src = other.store.get(j);
                if src.shape() == tensors[i].shape() {
                    tensors[i] = src.clone();
                    copied += 1;
                }
            }
        }
        let mut stats = self.store.stats().to_vec();
        for (i, name) in self.store.stats_names().iter().enumerate() {
            if let Some(j) = other.store.stats_names().iter().position(|n| n == name) {
                if other.store.stats()[j].channels() == stats[i].channels() {
                    stats[i] = other.store.stats()[j].clone();
                    copied += 1;
                }
            }
        }
        self.store
            .load(tensors, stats)
            .expect("shapes were checked while copying");
        copied
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        }
    }

    /// Arrange one mini-batch for this model's attention mode.
    pub fn encode(&self, samples: &[SampleRef<'_>]) -> Result<Inputs<T>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let side = self.config.input_size;
        let mut stems = Vec::with_capacity(samples.len());
        let mut atts = Vec::with_capacity(samples.len());
        for s in samples {
            if s.image.dims() != (side, side) {
                return Err(Error::InvalidArgument(format!(
                    "image is {}×{}, model expects {side}×{side}",
                    s.image.height(),
                    s.image.width()
                )));
            }
            let (stem, att) = encode_one(self.config.attention, s.image, s.s_mask, s.o_mask)?;
            stems.push(stem);
            atts.extend(att);
        }
        Ok(Inputs {
            stem: Tensor::stack(&stems)?,
            attention: if atts.is_empty() {
                None
            } else {
                Some(Tensor::stack(&atts)?)
            },
        })
    }

    /// Forward pass with parameters already bound on `tape` as `vars`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        inputs: &Inputs<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        if vars.len() != self.store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.store.len()
            )));
        }
        if self.config.attention.uses_units() != inputs.attention.is_some() {
            return Err(Error::InvalidArgument(format!(
                "inputs do not match the {:?} attention mode",
                self.config.attention
            )));
        }
        let stem_in = tape.constant(inputs.stem.clone());
        let att = inputs.attention.as_ref().map(|a| tape.constant(a.clone()));
        let stats = self.store.stats();
        let mut cx = Ctx::new(tape, vars, stats, mode, rng);
        let mut h = self.stem.forward(&mut cx, stem_in)?;
        if self.config.stem_pool > 1 {
            h = cx.tape.avg_pool(h, self.config.stem_pool)?;
        }
        for block in &self.blocks {
            h = block.forward(&mut cx, h, att)?;
        }
        let h = self.final_norm.forward_relu(&mut cx, h)?;
        let pooled = cx.tape.global_avg_pool(h)?;
        let prob = self.head.forward(&mut cx, pooled)?;
        Ok(Forward {
            prob,
            moments: cx.moments,
        })
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict(&self, inputs: &Inputs<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        // eval mode never draws from the stream
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &vars, inputs, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.prob)?.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Eval-mode probabilities for samples, evaluated in chunks of `batch`.
    pub fn predict_samples(&self, samples: &[SampleRef<'_>], batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch.max(1)) {
            out.extend(self.predict(&self.encode(chunk)?)?);
        }
        Ok(out)
    }
}

/// Stem input and optional attention input for one sample.
pub fn encode_one<T: Scalar>(
    mode: AttentionMode,
    image: &RgbImage,
    s_mask: &BinaryMask,
    o_mask: &BinaryMask,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let img = image_tensor(image)?;
    match mode {
        AttentionMode::Soft => Ok((img, Some(build_attention_input(s_mask, o_mask)?))),
        AttentionMode::Box => {
            let boxed = |m: &BinaryMask| {
                if m.is_empty() {
                    Ok(m.clone())
                } else {
                    m.to_box_mask()
                }
            };
            Ok((img, Some(build_attention_input(&boxed(s_mask)?, &boxed(o_mask)?)?)))
        }
        AttentionMode::Hard => Ok((hard_attention_input(&img, s_mask, o_mask)?, None)),
        AttentionMode::None => Ok((img, None)),
    }
}

/// `p(worn | S, O, I)` for one pair; `mode` must match the model.
pub fn predict_pair<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    s_mask: &BinaryMask,
    o_mask: &BinaryMask,
    mode: AttentionMode,
) -> Result<f64> {
    if mode != model.config().attention {
        return Err(Error::InvalidArgument(format!(
            "model was built for {:?} attention, asked for {mode:?}",
            model.config().attention
        )));
    }
    let sample = SampleRef {
        image,
        s_mask,
        o_mask,
        label: crate::data::Label::Worn,
    };
    Ok(model.predict(&model.encode(&[sample])?)?[0])
}
