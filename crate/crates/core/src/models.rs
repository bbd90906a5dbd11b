//! Builders for the four architectures and their presets.
//!
//! The geometry is taken row-by-row from the implementation tables:
//!
//! * **STL** (a): conv64 3×3 s1 +BN+ReLU → pool → conv64 +BN+ReLU → pool →
//!   FC flatten×384 +BN+ReLU → FC 384×192 +BN+ReLU → FC 192×classes.
//! * **MTL** (b): same trunk through the 384 row, then one 384→192→classes
//!   branch per task (the GS and UWL baselines train this architecture).
//! * **STVIB** (c): trunk FC flatten×1024 and two 1024×1024 rows (+BN+ReLU),
//!   two parallel plain FC 1024×d projections for μ and log-variance, then a
//!   256→384→192→classes decoder with BN+ReLU on both hidden rows.
//! * **MTVIB** (d): as (c) but one decoder per task, whose middle row
//!   "FC 384 × 192" is listed bare — no BN/ReLU — and is built that way.
//!
//! Valid convolution is forced by the tables' fan-in arithmetic: a 36×36
//! input gives 34 → 17 → 15 → 7, so the flatten row is 64·7·7 = 3136; the
//! 150×150 four-task shape gives 73 → 36 → 16 → 8, flatten 64·8·8 = 4096.
//!
//! The `desk` preset shrinks the 1024-wide trunk rows to 256 and the latent
//! to 32 but preserves the topology (conv stack and decoder widths
//! unchanged); STL/MTL have no 1024-wide rows, so their desk geometry equals
//! the `paper`-preset geometry.
//!
//! Weight init is fan-in-scaled Gaussian: std = √(2/fan_in) for rows feeding
//! a ReLU, √(1/fan_in) for the linear rows (μ/log-var projections, bare
//! decoder rows, logit rows); biases start at zero, BN at γ=1, β=0.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BnStats, Graph, Var};
use crate::linalg::conv_out_extent;
use crate::multitask::TaskUncertainty;
use crate::optim::ParamSet;
use crate::rng::{self, streams};
use crate::tensor::{Element, Tensor};
use crate::vib::{reparameterize, sample_noise, GaussianLatent};

/// Architecture family, per the table captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Stl,
    Mtl,
    Stvib,
    Mtvib,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Stl => "stl",
            Variant::Mtl => "mtl",
            Variant::Stvib => "stvib",
            Variant::Mtvib => "mtvib",
        }
    }

    pub fn is_vib(self) -> bool {
        matches!(self, Variant::Stvib | Variant::Mtvib)
    }

    pub fn is_single_task(self) -> bool {
        matches!(self, Variant::Stl | Variant::Stvib)
    }
}

/// Width preset: the full-scale geometry or the laptop-sized one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

/// Input geometry: the 36×36 two-digit overlays or the 150×150 four-task
/// face shape (architecture supported; no face data ships).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Overlay36,
    Face150,
}

/// One conv stage; a 2×2 max-pool always follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Declarative model geometry; [`build_model`] turns it into parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub input_hw: usize,
    pub in_channels: usize,
    pub conv: Vec<ConvStage>,
    /// Widths of the shared FC rows (each +BN+ReLU).
    pub trunk_fc: Vec<usize>,
    /// Latent dimension for the VIB variants.
    pub latent_d: Option<usize>,
    /// Decoder rows before the logits: (width, has BN+ReLU).
    pub decoder_hidden: Vec<(usize, bool)>,
    /// Class count per task head.
    pub heads: Vec<usize>,
    /// The flatten fan-in the tables declare; validated against the conv
    /// arithmetic.
    pub declared_flatten: usize,
}

impl ArchitectureSpec {
    /// Flatten size implied by the conv stack (channels · H' · W').
    pub fn flatten_size(&self) -> usize {
        let mut extent = self.input_hw;
        let mut channels = self.in_channels;
        for stage in &self.conv {
            extent = conv_out_extent(extent, stage.kernel, stage.stride);
            extent /= 2; // 2×2 max-pool, floor semantics
            channels = stage.filters;
        }
        channels * extent * extent
    }

    pub fn validate(&self) -> Result<()> {
        let computed = self.flatten_size();
        if computed != self.declared_flatten {
            return Err(Error::Spec(format!(
                "flatten size from conv arithmetic is {computed}, spec declares {}",
                self.declared_flatten
            )));
        }
        if self.heads.is_empty() {
            return Err(Error::Spec("at least one task head required".into()));
        }
        if let Some(&c) = self.heads.iter().find(|&&c| c < 2) {
            return Err(Error::Spec(format!("head with {c} classes; need ≥ 2")));
        }
        if self.trunk_fc.is_empty() {
            return Err(Error::Spec("trunk needs at least one FC row".into()));
        }
        Ok(())
    }

    /// The same geometry restricted to one head — how the single-task
    /// variants are instantiated per task.
    pub fn single_task(&self, task: usize) -> Result<ArchitectureSpec> {
        if task >= self.heads.len() {
            return Err(Error::Index(format!(
                "single_task: task {task} out of range for {} heads",
                self.heads.len()
            )));
        }
        let mut spec = self.clone();
        spec.heads = vec![self.heads[task]];
        Ok(spec)
    }
}

/// The preset geometry for a (preset, variant, input) triple. `tasks` is the
/// experiment's task count: overlays carry `tasks` 10-class heads, the
/// 150×150 shape is fixed to the 5/2/2/2 four-task heads.
pub fn architecture(
    preset: Preset,
    variant: Variant,
    tasks: usize,
    input: InputKind,
) -> Result<ArchitectureSpec> {
    let (input_hw, conv, declared_flatten, heads) = match input {
        InputKind::Overlay36 => {
            if tasks < 1 {
                return Err(Error::Contract("tasks must be ≥ 1".into()));
            }
            (36, vec![ConvStage { filters: 64, kernel: 3, stride: 1 }; 2], 3136, vec![10; tasks])
        }
        InputKind::Face150 => {
            if tasks != 4 {
                return Err(Error::Contract(format!(
                    "the 150×150 shape is four-task (5/2/2/2); got tasks = {tasks}"
                )));
            }
            (150, vec![ConvStage { filters: 64, kernel: 5, stride: 2 }; 2], 4096, vec![5, 2, 2, 2])
        }
    };

    let (trunk_fc, latent_d, decoder_hidden) = match variant {
        Variant::Stl | Variant::Mtl => (vec![384], None, vec![(192, true)]),
        Variant::Stvib | Variant::Mtvib => {
            let (trunk_w, d) = match preset {
                Preset::Paper => (1024, 256),
                Preset::Desk => (256, 32),
            };
            let decoder = match variant {
                Variant::Stvib => vec![(384, true), (192, true)],
                // Table (d) lists the middle decoder row bare.
                _ => vec![(384, true), (192, false)],
            };
            (vec![trunk_w; 3], Some(d), decoder)
        }
    };

    let spec = ArchitectureSpec {
        input_hw,
        in_channels: 1,
        conv,
        trunk_fc,
        latent_d,
        decoder_hidden,
        heads,
        declared_flatten,
    };
    spec.validate()?;
    Ok(spec)
}

// ---- parameter plan ---------------------------------------------------

#[derive(Debug, Clone)]
struct BnIds {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: usize,
    b: usize,
    bn: BnIds,
    stride: usize,
}

#[derive(Debug, Clone)]
struct FcLayer {
    w: usize,
    b: usize,
    bn: Option<BnIds>,
}

#[derive(Debug, Clone)]
struct Proj {
    mu: FcLayer,
    log_var: FcLayer,
    d: usize,
}

#[derive(Debug, Clone)]
struct Head {
    hidden: Vec<FcLayer>,
    logits: FcLayer,
}

#[derive(Debug, Clone)]
struct Plan {
    convs: Vec<ConvLayer>,
    trunk: Vec<FcLayer>,
    proj: Option<Proj>,
    heads: Vec<Head>,
}

/// Forward-pass behavior switches.
#[derive(Debug, Clone, Copy)]
pub struct Mode {
    /// Batch norm uses batch statistics and updates the running stats.
    pub bn_train: bool,
    /// Sample z = μ + σ⊙ε (otherwise z = μ deterministically).
    pub sample_latent: bool,
    /// Bind parameters without gradient tracking (attack generation).
    pub freeze_params: bool,
}

impl Mode {
    pub fn train() -> Self {
        Mode { bn_train: true, sample_latent: true, freeze_params: false }
    }

    pub fn eval() -> Self {
        Mode { bn_train: false, sample_latent: false, freeze_params: false }
    }

    /// Eval-time forward that still samples the latent (`--sample-eval`).
    pub fn eval_sampled() -> Self {
        Mode { bn_train: false, sample_latent: true, freeze_params: false }
    }

    pub fn frozen(mut self) -> Self {
        self.freeze_params = true;
        self
    }
}

/// Result of one forward pass over the tape.
pub struct Forward {
    /// Per-task logit nodes `[N, classes_k]`.
    pub logits: Vec<Var>,
    /// The latent posterior (VIB variants only).
    pub latent: Option<GaussianLatent>,
    /// The uncertainty vector leaf, when the model owns one.
    pub s: Option<Var>,
    /// The input leaf (gradient target for FGSM).
    pub input: Var,
    /// (parameter index, leaf var) for every bound parameter — the training
    /// loop reads gradients back through these.
    pub bindings: Vec<(usize, Var)>,
}

/// A built model: parameters, batch-norm state, and the wiring plan.
#[derive(Debug, Clone)]
pub struct ModelBundle<E: Element> {
    pub variant: Variant,
    pub spec: ArchitectureSpec,
    pub params: ParamSet<E>,
    /// Running batch-norm statistics, aligned with `bn_names`.
    pub bn: Vec<BnStats<E>>,
    /// Dotted path of each BN stats entry (for checkpoints).
    pub bn_names: Vec<String>,
    /// Index of `uncertainty.s` in `params`, when present.
    pub uncert_index: Option<usize>,
    plan: Plan,
}

struct Builder<'r, E: Element> {
    params: ParamSet<E>,
    bn: Vec<BnStats<E>>,
    bn_names: Vec<String>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r, E: Element> Builder<'r, E> {
    fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor<E> {
        let n = shape.iter().product();
        let data: Vec<E> = rng::standard_normal_vec(self.rng, n)
            .into_iter()
            .map(|v| E::from_f64(v * std))
            .collect();
        Tensor::from_vec(shape, data).expect("shape/product consistent")
    }

    fn bn_ids(&mut self, path: &str, channels: usize) -> Result<BnIds> {
        let gamma = self.params.add(format!("{path}.bn.gamma"), Tensor::filled(&[channels], E::ONE))?;
        let beta = self.params.add(format!("{path}.bn.beta"), Tensor::zeros(&[channels]))?;
        self.bn.push(BnStats::new(channels));
        self.bn_names.push(format!("{path}.bn"));
        Ok(BnIds { gamma, beta, stats: self.bn.len() - 1 })
    }

    fn conv(&mut self, path: &str, stage: &ConvStage, in_channels: usize) -> Result<ConvLayer> {
        let fan_in = in_channels * stage.kernel * stage.kernel;
        let weight = self.gaussian(
            &[stage.filters, in_channels, stage.kernel, stage.kernel],
            (2.0 / fan_in as f64).sqrt(),
        );
        let w = self.params.add(format!("{path}.weight"), weight)?;
        let b = self.params.add(format!("{path}.bias"), Tensor::zeros(&[stage.filters]))?;
        let bn = self.bn_ids(path, stage.filters)?;
        Ok(ConvLayer { w, b, bn, stride: stage.stride })
    }

    /// `relu` decides both the init scale and whether a BN block is created.
    fn fc(&mut self, path: &str, din: usize, dout: usize, relu: bool) -> Result<FcLayer> {
        let gain = if relu { 2.0 } else { 1.0 };
        let weight = self.gaussian(&[din, dout], (gain / din as f64).sqrt());
        let w = self.params.add(format!("{path}.weight"), weight)?;
        let b = self.params.add(format!("{path}.bias"), Tensor::zeros(&[dout]))?;
        let bn = if relu { Some(self.bn_ids(path, dout)?) } else { None };
        Ok(FcLayer { w, b, bn })
    }
}

/// Construct a model with fresh parameters. Seeded deterministically: the
/// same (spec, variant, seed) always yields identical weights.
pub fn build_model<E: Element>(
    spec: &ArchitectureSpec,
    variant: Variant,
    seed: u64,
) -> Result<ModelBundle<E>> {
    spec.validate()?;
    if variant.is_single_task() && spec.heads.len() != 1 {
        return Err(Error::Contract(format!(
            "{} is single-task; spec has {} heads (use ArchitectureSpec::single_task)",
            variant.as_str(),
            spec.heads.len()
        )));
    }
    if variant.is_vib() != spec.latent_d.is_some() {
        return Err(Error::Spec(format!(
            "variant {} and latent_d {:?} disagree",
            variant.as_str(),
            spec.latent_d
        )));
    }

    let mut init_rng = rng::stream_rng(seed, streams::INIT);
    let mut b = Builder {
        params: ParamSet::new(),
        bn: Vec::new(),
        bn_names: Vec::new(),
        rng: &mut init_rng,
    };

    let mut convs = Vec::new();
    let mut channels = spec.in_channels;
    for (i, stage) in spec.conv.iter().enumerate() {
        convs.push(b.conv(&format!("encoder.conv{}", i + 1), stage, channels)?);
        channels = stage.filters;
    }

    let mut trunk = Vec::new();
    let mut width = spec.flatten_size();
    for (i, &dout) in spec.trunk_fc.iter().enumerate() {
        trunk.push(b.fc(&format!("encoder.fc{}", i + 1), width, dout, true)?);
        width = dout;
    }

    let proj = match spec.latent_d {
        Some(d) => {
            let mu = b.fc("latent.mu", width, d, false)?;
            let log_var = b.fc("latent.log_var", width, d, false)?;
            width = d;
            Some(Proj { mu, log_var, d })
        }
        None => None,
    };

    let mut heads = Vec::new();
    for (t, &classes) in spec.heads.iter().enumerate() {
        let mut hidden = Vec::new();
        let mut hw = width;
        for (j, &(dout, relu)) in spec.decoder_hidden.iter().enumerate() {
            hidden.push(b.fc(&format!("decoder{t}.fc{}", j + 1), hw, dout, relu)?);
            hw = dout;
        }
        let logits = b.fc(&format!("decoder{t}.logits"), hw, classes, false)?;
        heads.push(Head { hidden, logits });
    }

    let uncert_index = if variant == Variant::Mtvib {
        let uncert = TaskUncertainty::<E>::new(spec.heads.len());
        Some(b.params.add(TaskUncertainty::<E>::PARAM_NAME, uncert.s.value)?)
    } else {
        None
    };

    Ok(ModelBundle {
        variant,
        spec: spec.clone(),
        params: b.params,
        bn: b.bn,
        bn_names: b.bn_names,
        uncert_index,
        plan: Plan { convs, trunk, proj, heads },
    })
}

impl<E: Element> ModelBundle<E> {
    /// Total trainable element count (the parameter audit subject).
    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Attach a learnable task-uncertainty vector (how the UWL baseline is
    /// derived from the MTL architecture). No-op if already present.
    pub fn add_task_uncertainty(&mut self) -> Result<usize> {
        if let Some(idx) = self.uncert_index {
            return Ok(idx);
        }
        let uncert = TaskUncertainty::<E>::new(self.spec.heads.len());
        let idx = self.params.add(TaskUncertainty::<E>::PARAM_NAME, uncert.s.value)?;
        self.uncert_index = Some(idx);
        Ok(idx)
    }

    fn bind(
        &self,
        g: &mut Graph<E>,
        idx: usize,
        mode: Mode,
        bindings: &mut Vec<(usize, Var)>,
    ) -> Var {
        let p = &self.params.get(idx).value;
        let var = if mode.freeze_params {
            g.leaf_data(p.shape(), p.data().to_vec(), false)
        } else {
            let v = g.leaf(p);
            bindings.push((idx, v));
            v
        };
        var
    }

    /// One forward pass over the whole bundle. The batch must be
    /// `[N, C, H, W]` matching the bundle's `ArchitectureSpec`; `rng` is
    /// required whenever
    /// `mode.sample_latent` and the model has a latent layer.
    ///
    /// Every task head receives the identical latent/features node.
    pub fn forward_multitask(
        &mut self,
        g: &mut Graph<E>,
        batch: &Tensor<E>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let want = [
            batch.shape().first().copied().unwrap_or(0),
            self.spec.in_channels,
            self.spec.input_hw,
            self.spec.input_hw,
        ];
        if batch.shape().len() != 4 || batch.shape()[1..] != want[1..] {
            return Err(Error::Dimension(format!(
                "forward: batch {:?}, spec wants [N, {}, {}, {}]",
                batch.shape(),
                want[1],
                want[2],
                want[3]
            )));
        }
        let n = batch.shape()[0];
        let mut bindings = Vec::new();
        let input = g.leaf(batch);

        let mut x = input;
        for layer in &self.plan.convs.clone() {
            let w = self.bind(g, layer.w, mode, &mut bindings);
            let b = self.bind(g, layer.b, mode, &mut bindings);
            let gamma = self.bind(g, layer.bn.gamma, mode, &mut bindings);
            let beta = self.bind(g, layer.bn.beta, mode, &mut bindings);
            x = g.conv2d(x, w, b, layer.stride)?;
            x = g.batchnorm(x, gamma, beta, &mut self.bn[layer.bn.stats], mode.bn_train)?;
            x = g.relu(x);
            x = g.maxpool2x2(x)?;
        }
        x = g.reshape(x, &[n, self.spec.flatten_size()])?;

        let fc_block = |this: &mut Self,
                        g: &mut Graph<E>,
                        x: Var,
                        layer: &FcLayer,
                        bindings: &mut Vec<(usize, Var)>|
         -> Result<Var> {
            let w = this.bind(g, layer.w, mode, bindings);
            let b = this.bind(g, layer.b, mode, bindings);
            let mut y = g.dense(x, w, b)?;
            if let Some(bn) = &layer.bn {
                let gamma = this.bind(g, bn.gamma, mode, bindings);
                let beta = this.bind(g, bn.beta, mode, bindings);
                y = g.batchnorm(y, gamma, beta, &mut this.bn[bn.stats], mode.bn_train)?;
                y = g.relu(y);
            }
            Ok(y)
        };

        for layer in &self.plan.trunk.clone() {
            x = fc_block(self, g, x, layer, &mut bindings)?;
        }

        let (features, latent) = match self.plan.proj.clone() {
            Some(proj) => {
                let mu = {
                    let w = self.bind(g, proj.mu.w, mode, &mut bindings);
                    let b = self.bind(g, proj.mu.b, mode, &mut bindings);
                    g.dense(x, w, b)?
                };
                let log_var = {
                    let w = self.bind(g, proj.log_var.w, mode, &mut bindings);
                    let b = self.bind(g, proj.log_var.b, mode, &mut bindings);
                    g.dense(x, w, b)?
                };
                let latent = GaussianLatent { mu, log_var, d: proj.d };
                let z = if mode.sample_latent {
                    let rng = rng.as_deref_mut().ok_or_else(|| {
                        Error::Contract("sampling forward needs an RNG".into())
                    })?;
                    let noise = sample_noise(g, n, proj.d, rng);
                    reparameterize(g, &latent, noise)?
                } else {
                    latent.mu
                };
                (z, Some(latent))
            }
            None => (x, None),
        };

        let mut logits = Vec::with_capacity(self.plan.heads.len());
        for head in &self.plan.heads.clone() {
            let mut h = features;
            for layer in &head.hidden {
                h = fc_block(self, g, h, layer, &mut bindings)?;
            }
            let w = self.bind(g, head.logits.w, mode, &mut bindings);
            let b = self.bind(g, head.logits.b, mode, &mut bindings);
            logits.push(g.dense(h, w, b)?);
        }

        let s = self.uncert_index.map(|idx| self.bind(g, idx, mode, &mut bindings));

        Ok(Forward { logits, latent, s, input, bindings })
    }

    /// Accumulate the gradients of a backward pass into the parameter slots.
    pub fn apply_gradients(&mut self, fwd: &Forward, grads: &crate::graph::Gradients<E>) {
        for &(idx, var) in &fwd.bindings {
            if let Some(gr) = grads.wrt(var) {
                self.params.get_mut(idx).value.accumulate_grad(gr);
            }
        }
    }

    /// Flatten all state (parameters + BN running stats) into named f64
    /// buffers for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for p in self.params.iter() {
            out.push((
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.data().iter().map(|v| v.to_f64()).collect(),
            ));
        }
        for (name, stats) in self.bn_names.iter().zip(&self.bn) {
            out.push((
                format!("{name}.running_mean"),
                vec![stats.running_mean.len()],
                stats.running_mean.iter().map(|v| v.to_f64()).collect(),
            ));
            out.push((
                format!("{name}.running_var"),
                vec![stats.running_var.len()],
                stats.running_var.iter().map(|v| v.to_f64()).collect(),
            ));
        }
        out
    }

    /// Restore state exported by [`Self::export_state`]; every entry must
    /// match an existing parameter or BN buffer by name and shape.
    pub fn import_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, shape, data) in entries {
            if let Some(idx) = self.params.index_of(name) {
                let value = &mut self.params.get_mut(idx).value;
                if value.shape() != &shape[..] {
                    return Err(Error::Dimension(format!(
                        "checkpoint entry {name}: shape {:?} vs model {:?}",
                        shape,
                        value.shape()
                    )));
                }
                for (dst, &src) in value.data_mut().iter_mut().zip(data) {
                    *dst = E::from_f64(src);
                }
            } else if let Some(stripped) = name.strip_suffix(".running_mean") {
                let i = self.bn_index(stripped, name)?;
                copy_into(&mut self.bn[i].running_mean, data, name)?;
            } else if let Some(stripped) = name.strip_suffix(".running_var") {
                let i = self.bn_index(stripped, name)?;
                copy_into(&mut self.bn[i].running_var, data, name)?;
            } else {
                return Err(Error::Format(format!("checkpoint entry {name:?} matches nothing")));
            }
        }
        Ok(())
    }

    fn bn_index(&self, stripped: &str, full: &str) -> Result<usize> {
        self.bn_names
            .iter()
            .position(|n| n == stripped)
            .ok_or_else(|| Error::Format(format!("checkpoint entry {full:?} matches no BN block")))
    }
}

fn copy_into<E: Element>(dst: &mut [E], src: &[f64], name: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Dimension(format!(
            "checkpoint entry {name}: {} values vs buffer {}",
            src.len(),
            dst.len()
        )));
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = E::from_f64(s);
    }
    Ok(())
}
