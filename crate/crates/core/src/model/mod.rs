//! Encoder/decoder networks for image-in-image hiding.
//!
//! Both coders share one layout: a 3×3 lifting convolution to 32 channels,
//! six separable-convolution residual (SCR) blocks, a 3×3 reducing
//! convolution back to RGB and a sigmoid. The encoder sees cover and hidden
//! concatenated by channel (6 in), the decoder only the embedded image.

mod checkpoint;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BatchNormState, ConvParams, Result, Scalar, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{stegnet_loss, LossComponents, LossVars};

pub const IMAGE_SIZE: usize = 64;
pub const WIDTH: usize = 32;
pub const BLOCKS: usize = 6;
pub const ELU_ALPHA: f64 = 1.0;

/// Separable convolution with residual: `elu(bn(pointwise(depthwise(x)))) + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScrBlock<T = f32> {
    /// `[c, 1, 3, 3]`
    pub depthwise: Tensor<T>,
    pub pointwise: ConvParams<T>,
    pub bn: BatchNormState<T>,
}

impl<T: Scalar> ScrBlock<T> {
    fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let depthwise = crate::tensor::normal_tensor(&[channels, 1, 3, 3], 2.0 / 9.0, rng);
        Self {
            depthwise,
            pointwise: ConvParams::scaled_normal(channels, channels, 1, rng),
            bn: BatchNormState::new(channels),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, vars: &mut std::slice::Iter<'_, Var>) -> Result<Var> {
        let [dw, pk, pb, gamma, beta] = take(vars)?;
        let y = tape.separable_conv2d(x, dw, pk, pb)?;
        let y = tape.batch_norm(y, gamma, beta, &mut self.bn)?;
        let y = tape.elu(y, ELU_ALPHA);
        tape.add(y, x)
    }
}

fn take<const N: usize>(vars: &mut std::slice::Iter<'_, Var>) -> Result<[Var; N]> {
    let mut out = [None; N];
    for slot in &mut out {
        *slot = vars.next().copied();
    }
    if out.iter().any(Option::is_none) {
        return Err(TensorError::Argument {
            op: "StegNet::forward",
            detail: "parameter list shorter than the network".into(),
        });
    }
    Ok(out.map(|v| v.expect("checked above")))
}

/// One half of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct StegNetCoder<T = f32> {
    pub lifting: ConvParams<T>,
    pub blocks: Vec<ScrBlock<T>>,
    pub reducing: ConvParams<T>,
}

impl<T: Scalar> StegNetCoder<T> {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let lifting = ConvParams::scaled_normal(WIDTH, in_channels, 3, rng);
        let blocks = (0..BLOCKS).map(|_| ScrBlock::init(WIDTH, rng)).collect();
        let reducing = ConvParams::scaled_normal(3, WIDTH, 3, rng);
        Self {
            lifting,
            blocks,
            reducing,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.lifting.in_channels()
    }

    fn set_training(&mut self, training: bool) {
        for b in &mut self.blocks {
            b.bn.training = training;
        }
    }

    /// Trainable tensors in canonical order, with names relative to the coder.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("lift.kernel".to_string(), &self.lifting.kernel),
            ("lift.bias".to_string(), &self.lifting.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.depthwise"), &b.depthwise));
            out.push((format!("block{i}.pointwise.kernel"), &b.pointwise.kernel));
            out.push((format!("block{i}.pointwise.bias"), &b.pointwise.bias));
            out.push((format!("block{i}.bn.gamma"), &b.bn.gamma));
            out.push((format!("block{i}.bn.beta"), &b.bn.beta));
        }
        out.push(("reduce.kernel".to_string(), &self.reducing.kernel));
        out.push(("reduce.bias".to_string(), &self.reducing.bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.lifting.kernel, &mut self.lifting.bias];
        for b in &mut self.blocks {
            out.push(&mut b.depthwise);
            out.push(&mut b.pointwise.kernel);
            out.push(&mut b.pointwise.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.reducing.kernel);
        out.push(&mut self.reducing.bias);
        out
    }

    /// Batch-norm running statistics (not trained, but persisted).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("block{i}.bn.running_mean"), &b.bn.running_mean),
                    (format!("block{i}.bn.running_var"), &b.bn.running_var),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.bn.running_mean, &mut b.bn.running_var])
            .collect()
    }

    /// Runs the coder on `x`, consuming this coder's parameter vars in
    /// [`parameters`](Self::parameters) order.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, vars: &mut std::slice::Iter<'_, Var>) -> Result<Var> {
        let [lk, lb] = take(vars)?;
        let mut h = tape.conv2d(x, lk, lb, self.lifting.stride, self.lifting.padding)?;
        for block in &mut self.blocks {
            h = block.forward(tape, h, vars)?;
        }
        let [rk, rb] = take(vars)?;
        let y = tape.conv2d(h, rk, rb, self.reducing.stride, self.reducing.padding)?;
        Ok(tape.sigmoid(y))
    }
}

/// Outputs of one encoder + decoder pass on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PassVars {
    pub embedded: Var,
    pub decoded: Var,
    pub loss: LossVars,
}

/// The full hiding network.
#[derive(Debug, Clone, PartialEq)]
pub struct StegNet<T = f32> {
    pub encoder: StegNetCoder<T>,
    pub decoder: StegNetCoder<T>,
}

impl<T: Scalar> StegNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = StegNetCoder::new(6, &mut rng);
        let decoder = StegNetCoder::new(3, &mut rng);
        Self { encoder, decoder }
    }

    pub fn set_training(&mut self, training: bool) {
        self.encoder.set_training(training);
        self.decoder.set_training(training);
    }

    /// Named trainable tensors: encoder first, then decoder.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let enc = self.encoder.parameters().into_iter().map(|(n, t)| (format!("encoder.{n}"), t));
        let dec = self.decoder.parameters().into_iter().map(|(n, t)| (format!("decoder.{n}"), t));
        enc.chain(dec).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.parameters_mut();
        out.extend(self.decoder.parameters_mut());
        out
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let enc = self.encoder.buffers().into_iter().map(|(n, t)| (format!("encoder.{n}"), t));
        let dec = self.decoder.buffers().into_iter().map(|(n, t)| (format!("decoder.{n}"), t));
        enc.chain(dec).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.buffers_mut();
        out.extend(self.decoder.buffers_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every trainable tensor on `tape` in canonical order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.parameters().into_iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Encoder, decoder and loss on one tape with caller-supplied parameter vars.
    pub fn pass(&mut self, tape: &mut Tape<T>, cover: Var, hidden: Var, vars: &[Var]) -> Result<PassVars> {
        let mut it = vars.iter();
        let input = tape.concat_channels(cover, hidden)?;
        let embedded = self.encoder.forward(tape, input, &mut it)?;
        let decoded = self.decoder.forward(tape, embedded, &mut it)?;
        if it.next().is_some() {
            return Err(TensorError::Argument {
                op: "StegNet::pass",
                detail: "more parameter vars than the network holds".into(),
            });
        }
        let loss = loss::loss_graph(tape, cover, hidden, embedded, decoded)?;
        Ok(PassVars {
            embedded,
            decoded,
            loss,
        })
    }

    /// Embedded batch `E = F_CE(C, H)`, evaluated with running batch-norm statistics.
    pub fn encode(&self, cover: &Tensor<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        check_images("encode", cover)?;
        check_images("encode", hidden)?;
        if cover.shape() != hidden.shape() {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!("cover {:?} vs hidden {:?}", cover.shape(), hidden.shape()),
            });
        }
        let mut enc = self.encoder.clone();
        enc.set_training(false);
        let mut tape = Tape::new();
        let c = tape.constant(cover.clone());
        let h = tape.constant(hidden.clone());
        let x = tape.concat_channels(c, h)?;
        let vars: Vec<Var> = enc.parameters().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let y = enc.forward(&mut tape, x, &mut vars.iter())?;
        Ok(tape.value(y).clone())
    }

    /// Decoded batch `D = F_ED(E)`, evaluated with running batch-norm statistics.
    pub fn decode(&self, embedded: &Tensor<T>) -> Result<Tensor<T>> {
        check_images("decode", embedded)?;
        let mut dec = self.decoder.clone();
        dec.set_training(false);
        let mut tape = Tape::new();
        let e = tape.constant(embedded.clone());
        let vars: Vec<Var> = dec.parameters().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let y = dec.forward(&mut tape, e, &mut vars.iter())?;
        Ok(tape.value(y).clone())
    }
}

/// `[n, 3, 64, 64]` with every value in `[0, 1]`.
fn check_images<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    match t.shape() {
        &[_, 3, h, w] if h == IMAGE_SIZE && w == IMAGE_SIZE => {}
        s => {
            return Err(TensorError::Shape {
                op,
                detail: format!("expected [n, 3, {IMAGE_SIZE}, {IMAGE_SIZE}], got {s:?}"),
            })
        }
    }
    if let Some(v) = t.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(TensorError::Argument {
            op,
            detail: format!("pixel value {v} outside [0, 1]"),
        });
    }
    Ok(())
}

/// One optimizer update on a `(cover, hidden)` batch in training mode.
pub fn train_step(ckpt: &mut Checkpoint, cover: &Tensor<f32>, hidden: &Tensor<f32>) -> Result<LossComponents> {
    let model = &mut ckpt.model;
    model.set_training(true);
    let mut tape = Tape::new();
    let c = tape.constant(cover.clone());
    let h = tape.constant(hidden.clone());
    let vars = model.bind(&mut tape);
    let pass = model.pass(&mut tape, c, h, &vars)?;
    let loss = pass.loss.values(&tape);
    tape.backward(pass.loss.total)?;
    let grads: Vec<Tensor<f32>> = vars
        .iter()
        .zip(model.parameters())
        .map(|(&v, (_, p))| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);
    let mut params = model.parameters_mut();
    ckpt.optimizer.step(&mut params, &grads)?;
    ckpt.step += 1;
    Ok(loss)
}
