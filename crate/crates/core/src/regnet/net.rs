//! Parameter containers and the forward pipeline: shared stem, attention
//! exchange, transposed-convolution upsampling, U-Net trunk, distribution
//! heads, velocity sampling, integration, and the final warp.

use rand_chacha::ChaCha8Rng;

use crate::coattention::{
    co_attention_bypass, co_attention_forward, CoAttentionOutput, CoAttentionParams,
    TapedCoAttention,
};
use crate::error::{Error, Result};
use crate::params::{ConvParam, TapedConv};
use crate::rng::{derive, Stream};
use crate::tensor::{KernelDims, Padding, Real, ResizeFactor, Tape, TensorId, Value};

use super::{FlowDistribution, NetworkConfig, NetworkGeometry};

const LEAKY_SLOPE: f64 = 0.2;
/// Fresh networks start almost deterministic: sigma^2 = e^-10.
const LOG_VAR_INIT: f64 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Mean,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPath {
    Full,
    /// Ablation: direct projections only, no similarity exchange.
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldResolution {
    Half,
    Full,
}

/// Displacement in voxels, channels (dx, dy, dz).
#[derive(Debug, Clone, Copy)]
pub struct DeformationField {
    pub disp: TensorId,
    pub resolution: FieldResolution,
}

#[derive(Debug, Clone, Copy)]
pub struct Registration {
    pub warped: TensorId,
    pub flow: DeformationField,
    pub dist: FlowDistribution,
    pub attention: Option<CoAttentionOutput>,
}

#[derive(Debug, Clone)]
pub struct RegNetParams<T> {
    pub config: NetworkConfig,
    pub geometry: NetworkGeometry,
    pub stem: [ConvParam<T>; 2],
    pub coatt: CoAttentionParams<T>,
    pub up: ConvParam<T>,
    pub enc: Vec<ConvParam<T>>,
    pub dec: Vec<ConvParam<T>>,
    pub mu_head: ConvParam<T>,
    pub log_var_head: ConvParam<T>,
}

/// Tape handles in visit order, plus the geometry the forward pass needs.
#[derive(Debug, Clone)]
pub struct TapedRegNet {
    pub config: NetworkConfig,
    pub geometry: NetworkGeometry,
    pub stem: [TapedConv; 2],
    pub coatt: TapedCoAttention,
    pub up: TapedConv,
    pub enc: Vec<TapedConv>,
    pub dec: Vec<TapedConv>,
    pub mu_head: TapedConv,
    pub log_var_head: TapedConv,
}

fn k3(c_out: usize, c_in: usize) -> KernelDims {
    KernelDims { c_out, c_in, kx: 3, ky: 3, kz: 3 }
}

/// Encoder input width at U-Net level `l` (the decoder mirrors it).
fn level_width(config: &NetworkConfig, l: usize) -> usize {
    if l == 0 {
        config.att_channels
    } else {
        config.unet_channels[l - 1]
    }
}

impl<T: Real> RegNetParams<T> {
    /// Builds and validates the whole parameter set from the seeded
    /// generator. Distribution heads start at the identity transform:
    /// mu = 0 and log_var = -10 everywhere.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        let geometry = config.geometry()?;
        let mut rng = derive(config.seed, Stream::WeightInit);
        let stem = [
            ConvParam::he(k3(config.stem_channels[0], 1), &mut rng),
            ConvParam::he(k3(config.stem_channels[1], config.stem_channels[0]), &mut rng),
        ];
        let coatt =
            CoAttentionParams::init(config.stem_channels[1], config.att_channels, &mut rng);
        let up = ConvParam::he(
            KernelDims {
                c_out: config.att_channels,
                c_in: 4 * config.att_channels,
                kx: 2,
                ky: 2,
                kz: 2,
            },
            &mut rng,
        );
        let mut enc = Vec::with_capacity(config.unet_depth);
        for l in 0..config.unet_depth {
            enc.push(ConvParam::he(k3(config.unet_channels[l], level_width(config, l)), &mut rng));
        }
        let mut dec = Vec::with_capacity(config.unet_depth);
        for l in 0..config.unet_depth {
            let c_in = config.unet_channels[l] + level_width(config, l);
            dec.push(ConvParam::he(k3(level_width(config, l), c_in), &mut rng));
        }
        let trunk = level_width(config, 0);
        let mu_head = ConvParam::zero_with_bias(k3(3, trunk), 0.0);
        let log_var_head = ConvParam::zero_with_bias(k3(3, trunk), LOG_VAR_INIT);
        Ok(RegNetParams {
            config: config.clone(),
            geometry,
            stem,
            coatt,
            up,
            enc,
            dec,
            mu_head,
            log_var_head,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Value<T>)) {
        self.stem[0].visit("stem.0", f);
        self.stem[1].visit("stem.1", f);
        self.coatt.visit("coatt", f);
        self.up.visit("up", f);
        for (l, p) in self.enc.iter().enumerate() {
            p.visit(&format!("enc.{l}"), f);
        }
        for (l, p) in self.dec.iter().enumerate() {
            p.visit(&format!("dec.{l}"), f);
        }
        self.mu_head.visit("mu_head", f);
        self.log_var_head.visit("log_var_head", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Value<T>)) {
        self.stem[0].visit_mut("stem.0", f);
        self.stem[1].visit_mut("stem.1", f);
        self.coatt.visit_mut("coatt", f);
        self.up.visit_mut("up", f);
        for (l, p) in self.enc.iter_mut().enumerate() {
            p.visit_mut(&format!("enc.{l}"), f);
        }
        for (l, p) in self.dec.iter_mut().enumerate() {
            p.visit_mut(&format!("dec.{l}"), f);
        }
        self.mu_head.visit_mut("mu_head", f);
        self.log_var_head.visit_mut("log_var_head", f);
    }

    /// Pushes every tensor as a tape leaf, in visit order.
    pub fn push(&self, tape: &mut Tape<T>, trainable: bool) -> Result<TapedRegNet> {
        Ok(TapedRegNet {
            config: self.config.clone(),
            geometry: self.geometry.clone(),
            stem: [self.stem[0].push(tape, trainable)?, self.stem[1].push(tape, trainable)?],
            coatt: self.coatt.push(tape, trainable)?,
            up: self.up.push(tape, trainable)?,
            enc: self.enc.iter().map(|p| p.push(tape, trainable)).collect::<Result<_>>()?,
            dec: self.dec.iter().map(|p| p.push(tape, trainable)).collect::<Result<_>>()?,
            mu_head: self.mu_head.push(tape, trainable)?,
            log_var_head: self.log_var_head.push(tape, trainable)?,
        })
    }
}

impl RegNetParams<f32> {
    /// Same weights at f64 working precision, for inference paths that want
    /// the extra headroom. Traversal order of visit and visit_mut is
    /// identical, so the copy pairs tensors one to one.
    pub fn widen(&self) -> Result<RegNetParams<f64>> {
        let mut narrow: Vec<Value<f32>> = Vec::new();
        self.visit(&mut |_, v| narrow.push(v.clone()));
        let mut wide = RegNetParams::<f64>::init(&self.config)?;
        let mut i = 0;
        wide.visit_mut(&mut |_, v| {
            let data: Vec<f64> = narrow[i].data().iter().map(|&x| x as f64).collect();
            *v = Value::new(v.dims().to_vec(), data).expect("matching traversal");
            i += 1;
        });
        Ok(wide)
    }
}

impl TapedRegNet {
    /// Leaf ids in visit order, for positional gradient collection.
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        let mut ids = Vec::new();
        for c in [&self.stem[0], &self.stem[1]] {
            ids.push(c.weight);
            ids.push(c.bias);
        }
        ids.extend(self.coatt.leaf_ids());
        for c in [&self.up]
            .into_iter()
            .chain(self.enc.iter())
            .chain(self.dec.iter())
            .chain([&self.mu_head, &self.log_var_head])
        {
            ids.push(c.weight);
            ids.push(c.bias);
        }
        ids
    }
}

fn stem_tower<T: Real>(tape: &mut Tape<T>, net: &TapedRegNet, img: TensorId) -> Result<TensorId> {
    let s2 = [2, 2, 2];
    let c0 = tape.conv3d(img, net.stem[0].weight, net.stem[0].bias, s2, Padding::Same)?;
    let a0 = tape.leaky_relu(c0, LEAKY_SLOPE)?;
    let c1 = tape.conv3d(a0, net.stem[1].weight, net.stem[1].bias, s2, Padding::Same)?;
    tape.leaky_relu(c1, LEAKY_SLOPE)
}

/// Two shared stride-2 convolution layers per volume.
pub fn extract_features<T: Real>(
    tape: &mut Tape<T>,
    net: &TapedRegNet,
    moving: TensorId,
    fixed: TensorId,
) -> Result<(TensorId, TensorId)> {
    let expect = net.config.in_shape;
    for (name, id) in [("moving", moving), ("fixed", fixed)] {
        let gd = tape.value(id).grid_dims()?;
        if gd.c != 1 || [gd.w, gd.h, gd.d] != expect {
            return Err(Error::shape(format!(
                "{name} volume has grid {:?}, expected single-channel {expect:?}",
                gd.dims()
            )));
        }
    }
    let f_mov = stem_tower(tape, net, moving)?;
    let f_fix = stem_tower(tape, net, fixed)?;
    Ok((f_mov, f_fix))
}

/// Concatenation, one transposed-convolution upsampling block, U-Net with
/// skip connections, and the two distribution heads at half resolution.
pub fn predict_flow_distribution<T: Real>(
    tape: &mut Tape<T>,
    net: &TapedRegNet,
    f_mov: TensorId,
    f_fix: TensorId,
    o_mov: TensorId,
    o_fix: TensorId,
) -> Result<FlowDistribution> {
    let one = [1, 1, 1];
    let cat = tape.concat_channels(&[f_mov, f_fix, o_mov, o_fix])?;
    let up = tape.conv_transpose3d(cat, net.up.weight, net.up.bias, [2, 2, 2])?;
    let mut cur = tape.leaky_relu(up, LEAKY_SLOPE)?;

    let depth = net.config.unet_depth;
    let mut skips = Vec::with_capacity(depth);
    for l in 0..depth {
        skips.push(cur);
        let conv = tape.conv3d(
            cur,
            net.enc[l].weight,
            net.enc[l].bias,
            net.geometry.level_strides[l],
            Padding::Same,
        )?;
        cur = tape.leaky_relu(conv, LEAKY_SLOPE)?;
    }
    for l in (0..depth).rev() {
        let factors = net.geometry.level_strides[l].map(|s| {
            if s == 2 {
                ResizeFactor::Double
            } else {
                ResizeFactor::Same
            }
        });
        let upsampled = tape.resize_trilinear(cur, factors)?;
        let cat = tape.concat_channels(&[upsampled, skips[l]])?;
        let conv = tape.conv3d(cat, net.dec[l].weight, net.dec[l].bias, one, Padding::Same)?;
        cur = tape.leaky_relu(conv, LEAKY_SLOPE)?;
    }

    let mu = tape.conv3d(cur, net.mu_head.weight, net.mu_head.bias, one, Padding::Same)?;
    let lv = tape.conv3d(cur, net.log_var_head.weight, net.log_var_head.bias, one, Padding::Same)?;
    FlowDistribution::new(tape, mu, lv)
}

/// Reparameterized draw (mode = Sample) or the posterior mean (mode = Mean).
pub fn sample_velocity<T: Real>(
    tape: &mut Tape<T>,
    dist: &FlowDistribution,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    match mode {
        SampleMode::Mean => Ok(dist.mu),
        SampleMode::Sample => {
            let mut eps = Value::grid(dist.dims());
            eps.fill_std_normal(rng, T::of(1.0));
            let eps = tape.constant(eps)?;
            let half_lv = tape.affine(dist.log_var, 0.5, 0.0)?;
            let std = tape.exp(half_lv)?;
            let noise = tape.mul(std, eps)?;
            tape.add(dist.mu, noise)
        }
    }
}

/// Scaling and squaring: u <- u + u(id + u), `steps` times, starting from
/// z / 2^steps. Returns the displacement of the flow's exponential.
pub fn integrate_svf<T: Real>(
    tape: &mut Tape<T>,
    z: TensorId,
    steps: u32,
    resolution: FieldResolution,
) -> Result<DeformationField> {
    if steps < 1 {
        return Err(Error::usage("integration needs at least one squaring step"));
    }
    let gd = tape.value(z).grid_dims()?;
    if gd.c != 3 {
        return Err(Error::shape(format!("velocity field needs 3 channels, got {}", gd.c)));
    }
    let scale = 1.0 / f64::powi(2.0, steps as i32);
    let mut u = tape.affine(z, scale, 0.0)?;
    for _ in 0..steps {
        let moved = tape.grid_sample(u, u)?;
        u = tape.add(u, moved)?;
    }
    Ok(DeformationField { disp: u, resolution })
}

/// Trilinear x2 resize with the displacement values doubled to keep voxel
/// units consistent across the grid change.
pub fn upsample_flow<T: Real>(
    tape: &mut Tape<T>,
    field: &DeformationField,
) -> Result<DeformationField> {
    if field.resolution == FieldResolution::Full {
        return Err(Error::usage("deformation field is already at full resolution"));
    }
    let up = tape.resize_trilinear(field.disp, [ResizeFactor::Double; 3])?;
    let disp = tape.affine(up, 2.0, 0.0)?;
    Ok(DeformationField { disp, resolution: FieldResolution::Full })
}

/// The full pipeline, ending in the warped moving volume.
pub fn register_pair<T: Real>(
    tape: &mut Tape<T>,
    net: &TapedRegNet,
    moving: TensorId,
    fixed: TensorId,
    mode: SampleMode,
    path: AttentionPath,
    rng: &mut ChaCha8Rng,
) -> Result<Registration> {
    let (f_mov, f_fix) = extract_features(tape, net, moving, fixed)?;
    let (o_mov, o_fix, attention) = match path {
        AttentionPath::Full => {
            let out = co_attention_forward(tape, &net.coatt, f_mov, f_fix)?;
            (out.o_mov, out.o_fix, Some(out))
        }
        AttentionPath::Bypass => {
            let (o_mov, o_fix) = co_attention_bypass(tape, &net.coatt, f_mov, f_fix)?;
            (o_mov, o_fix, None)
        }
    };
    let dist = predict_flow_distribution(tape, net, f_mov, f_fix, o_mov, o_fix)?;
    let z = sample_velocity(tape, &dist, mode, rng)?;
    let half = integrate_svf(tape, z, net.config.integration_steps, FieldResolution::Half)?;
    let flow = upsample_flow(tape, &half)?;
    let warped = tape.grid_sample(moving, flow.disp)?;
    Ok(Registration { warped, flow, dist, attention })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_cover_every_tensor_once() {
        let params = RegNetParams::<f64>::init(&NetworkConfig::default()).unwrap();
        let mut names = Vec::new();
        params.visit(&mut |n, _| names.push(n.to_string()));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        // 2 stem + 6 attention convs + up + 3 enc + 3 dec + 2 heads, two
        // tensors each, plus the two blend scalars.
        assert_eq!(names.len(), 17 * 2 + 2);

        let mut t = Tape::<f64>::new();
        let net = params.push(&mut t, true).unwrap();
        assert_eq!(net.leaf_ids().len(), names.len());
    }

    #[test]
    fn decoder_widths_mirror_encoder_inputs() {
        let params = RegNetParams::<f64>::init(&NetworkConfig::default()).unwrap();
        assert_eq!(params.dec[2].weight.dims(), &[32, 3, 3, 3, 64]);
        assert_eq!(params.dec[1].weight.dims(), &[32, 3, 3, 3, 64]);
        assert_eq!(params.dec[0].weight.dims(), &[16, 3, 3, 3, 48]);
        assert_eq!(params.up.weight.dims(), &[16, 2, 2, 2, 64]);
        assert_eq!(params.mu_head.weight.dims(), &[3, 3, 3, 3, 16]);
    }
}
