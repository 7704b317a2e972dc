//! Miniature style-modulated generator with an explicit style space.
//!
//! `z -> w` is a two-layer mapping network; each style layer `i` has its own
//! affine map `s^i = A^i w + b^i`. Synthesis starts from a learned constant;
//! a conv layer scales input feature channel `c` by `s^i_c`, then applies a
//! 3x3 convolution, bias and leaky-ReLU. A tRGB layer scales its input the
//! same way and projects to colour with a 1x1 convolution; tRGB outputs are
//! upsampled and summed across resolutions before a final sigmoid.

mod layers;
mod planted;
mod style;

pub use layers::{ChannelId, LayerKind, LayerSpec, StyleLayer};
pub use planted::{make_planted, GroundTruth, GroundTruthEntry, Plant, PlantedSpec};
pub use style::StyleVector;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{forward_eval, Bindings, Graph, GraphBuilder, NodeId, Tensor};

/// Largest output resolution the synthesis network will build.
pub const MAX_RESOLUTION: usize = 64;

pub const COLOR_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub layer_spec: LayerSpec,
    pub weight_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            z_dim: 16,
            w_dim: 16,
            layer_spec: LayerSpec::toy(),
            weight_seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn with_spec(layer_spec: LayerSpec) -> Self {
        GeneratorConfig {
            layer_spec,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct MappingNet {
    w1: Arc<Tensor>,
    b1: Arc<Tensor>,
    w2: Arc<Tensor>,
    b2: Arc<Tensor>,
}

#[derive(Clone, Debug)]
struct StyleAffine {
    a: Arc<Tensor>,
    b: Arc<Tensor>,
}

#[derive(Clone, Debug)]
enum SynthLayer {
    Conv {
        weight: Arc<Tensor>,
        bias: Arc<Tensor>,
        upsample: bool,
    },
    ToRgb {
        weight: Arc<Tensor>,
        bias: Arc<Tensor>,
    },
}

#[derive(Clone, Debug)]
struct SynthesisNet {
    constant: Arc<Tensor>,
    layers: Vec<SynthLayer>,
}

/// Extra linear read-out used by planted generators: the pre-sigmoid image
/// becomes `base_gain * rgb + sum_l reshape(P_l s^l)`.
#[derive(Clone, Debug)]
pub(crate) struct PlantedReadout {
    pub(crate) base_gain: f64,
    pub(crate) per_layer: Vec<Option<Arc<Tensor>>>,
    pub(crate) spec_json: String,
}

/// Generator weights. Immutable after construction and cheap to clone.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    mapping: MappingNet,
    affines: Vec<StyleAffine>,
    synthesis: Option<SynthesisNet>,
    planted: Option<PlantedReadout>,
    fingerprint: String,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Arc<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Arc::new(Tensor::from_parts_unchecked(shape, data))
}

impl Generator {
    /// Seeded initialisation: weights `N(0, 1/fan_in)`, affine biases `N(0, 1)`.
    /// The synthesis network is only built when the spec is synthesizable at
    /// desk scale; larger specs still expose mapping and style affines.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.layer_spec.validate()?;
        if config.z_dim == 0 || config.w_dim == 0 {
            return Err(Error::Config("z_dim and w_dim must be positive".into()));
        }
        let mut rng = rng::seeded(config.weight_seed);
        let (z, w) = (config.z_dim, config.w_dim);
        let mapping = MappingNet {
            w1: gaussian(&mut rng, vec![w, z], 1.0 / (z as f64).sqrt()),
            b1: gaussian(&mut rng, vec![w], 1.0 / (z as f64).sqrt()),
            w2: gaussian(&mut rng, vec![w, w], 1.0 / (w as f64).sqrt()),
            b2: gaussian(&mut rng, vec![w], 1.0 / (w as f64).sqrt()),
        };
        let affines = config
            .layer_spec
            .layers
            .iter()
            .map(|l| StyleAffine {
                a: gaussian(&mut rng, vec![l.channels, w], 1.0 / (w as f64).sqrt()),
                b: gaussian(&mut rng, vec![l.channels], 1.0),
            })
            .collect();
        let synthesis = match config.layer_spec.check_synthesizable(MAX_RESOLUTION) {
            Ok(()) => Some(Self::init_synthesis(&config.layer_spec, &mut rng)?),
            Err(_) => None,
        };
        let mut g = Generator {
            config,
            mapping,
            affines,
            synthesis,
            planted: None,
            fingerprint: String::new(),
        };
        g.refresh_fingerprint();
        Ok(g)
    }

    fn init_synthesis(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<SynthesisNet> {
        let first = &spec.layers[0];
        let constant = gaussian(rng, vec![first.channels, first.resolution, first.resolution], 1.0);
        let mut resolution = first.resolution;
        let mut layers = Vec::with_capacity(spec.len());
        // the skip outputs are summed, so shrink each one to keep the total
        // inside the sigmoid's unsaturated range
        let rgb_layers = spec.layers.iter().filter(|l| l.kind == LayerKind::ToRgb).count();
        let rgb_gain = 1.0 / ((2 * rgb_layers.max(1)) as f64).sqrt();
        for (i, l) in spec.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv => {
                    let out = spec.conv_output_channels(i)?;
                    let fan_in = (l.channels * 9) as f64;
                    layers.push(SynthLayer::Conv {
                        weight: gaussian(rng, vec![out, l.channels, 3, 3], 1.0 / fan_in.sqrt()),
                        bias: gaussian(rng, vec![out], 0.1),
                        upsample: l.resolution != resolution,
                    });
                    resolution = l.resolution;
                }
                LayerKind::ToRgb => layers.push(SynthLayer::ToRgb {
                    weight: gaussian(rng, vec![COLOR_CHANNELS, l.channels, 1, 1], rgb_gain / (l.channels as f64).sqrt()),
                    bias: gaussian(rng, vec![COLOR_CHANNELS], 0.1),
                }),
            }
        }
        Ok(SynthesisNet { constant, layers })
    }

    fn refresh_fingerprint(&mut self) {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let feed = |h: &mut Sha256, t: &Tensor| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        for t in [&self.mapping.w1, &self.mapping.b1, &self.mapping.w2, &self.mapping.b2] {
            feed(&mut h, t);
        }
        for a in &self.affines {
            feed(&mut h, &a.a);
            feed(&mut h, &a.b);
        }
        if let Some(net) = &self.synthesis {
            feed(&mut h, &net.constant);
            for l in &net.layers {
                match l {
                    SynthLayer::Conv { weight, bias, .. } | SynthLayer::ToRgb { weight, bias } => {
                        feed(&mut h, weight);
                        feed(&mut h, bias);
                    }
                }
            }
        }
        if let Some(p) = &self.planted {
            h.update(p.spec_json.as_bytes());
            for t in p.per_layer.iter().flatten() {
                feed(&mut h, t);
            }
        }
        self.fingerprint = hex::encode(&h.finalize()[..8]);
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.config.layer_spec
    }

    /// Stable hash of configuration and every weight.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn resolution(&self) -> usize {
        self.spec().output_resolution()
    }

    pub fn is_planted(&self) -> bool {
        self.planted.is_some()
    }

    pub fn can_synthesize(&self) -> bool {
        self.synthesis.is_some()
    }

    /// Standard-normal latent for sample `index` of stream `seed`.
    pub fn sample_z(&self, seed: u64, index: u64) -> Tensor {
        let mut rng = rng::stream(seed, index);
        let data = (0..self.config.z_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::from_parts_unchecked(vec![self.config.z_dim], data)
    }

    fn mapping_nodes(&self, b: &mut GraphBuilder, z: NodeId) -> Result<NodeId> {
        let m = &self.mapping;
        let (w1, b1, w2, b2) = (
            b.constant(m.w1.clone()),
            b.constant(m.b1.clone()),
            b.constant(m.w2.clone()),
            b.constant(m.b2.clone()),
        );
        let h = b.matmul(w1, z)?;
        let h = b.add(h, b1)?;
        let h = b.leaky_relu(h)?;
        let w = b.matmul(w2, h)?;
        b.add(w, b2)
    }

    fn style_nodes(&self, b: &mut GraphBuilder, w: NodeId) -> Result<Vec<NodeId>> {
        self.affines
            .iter()
            .map(|aff| {
                let a = b.constant(aff.a.clone());
                let bias = b.constant(aff.b.clone());
                let s = b.matmul(a, w)?;
                b.add(s, bias)
            })
            .collect()
    }

    /// `w = T(z)`: two fully connected layers with a leaky-ReLU between.
    pub fn map_latent(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape() != [self.config.z_dim] {
            return Err(Error::ShapeMismatch {
                op: "map_latent",
                detail: format!("z has shape {:?}, expected [{}]", z.shape(), self.config.z_dim),
            });
        }
        let mut b = GraphBuilder::new();
        let zn = b.input("z", z.shape())?;
        let w = self.mapping_nodes(&mut b, zn)?;
        let g = b.finish();
        let eval = forward_eval(&g, &Bindings::from([("z".to_string(), z.clone())]))?;
        Ok(eval.value(w).clone())
    }

    /// `s^i = A^i w + b^i` for every style layer.
    pub fn style_from_w(&self, w: &Tensor) -> Result<StyleVector> {
        if w.shape() != [self.config.w_dim] {
            return Err(Error::ShapeMismatch {
                op: "style_from_w",
                detail: format!("w has shape {:?}, expected [{}]", w.shape(), self.config.w_dim),
            });
        }
        let mut b = GraphBuilder::new();
        let wn = b.input("w", w.shape())?;
        let styles = self.style_nodes(&mut b, wn)?;
        let g = b.finish();
        let eval = forward_eval(&g, &Bindings::from([("w".to_string(), w.clone())]))?;
        Ok(StyleVector::new(
            styles.iter().map(|id| eval.value(*id).data().to_vec()).collect(),
        ))
    }

    pub fn style_from_z(&self, z: &Tensor) -> Result<StyleVector> {
        self.style_from_w(&self.map_latent(z)?)
    }

    /// Graph computing `w -> s` so gradients with respect to `w` are available.
    pub fn style_graph(&self) -> Result<(Graph, Vec<NodeId>)> {
        let mut b = GraphBuilder::new();
        let wn = b.input("w", &[self.config.w_dim])?;
        let styles = self.style_nodes(&mut b, wn)?;
        Ok((b.finish(), styles))
    }

    /// Declares one input per style layer (`s0`, `s1`, ...).
    pub fn style_inputs(&self, b: &mut GraphBuilder) -> Result<Vec<NodeId>> {
        self.spec()
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| b.input(&style_input_name(i), &[l.channels]))
            .collect()
    }

    /// Pre-sigmoid colour map `[3, h, w]` from style nodes.
    pub fn build_pre_sigmoid(&self, b: &mut GraphBuilder, styles: &[NodeId]) -> Result<NodeId> {
        let net = self.synthesis.as_ref().ok_or_else(|| {
            Error::UnsupportedSpec(format!(
                "spec `{}` is not synthesizable at <= {MAX_RESOLUTION} px",
                self.spec().name
            ))
        })?;
        if styles.len() != net.layers.len() {
            return Err(Error::ShapeMismatch {
                op: "synthesize",
                detail: format!("{} style nodes for {} layers", styles.len(), net.layers.len()),
            });
        }
        let mut x = b.constant(net.constant.clone());
        let mut rgb: Option<NodeId> = None;
        for (layer, &s) in net.layers.iter().zip(styles) {
            match layer {
                SynthLayer::Conv { weight, bias, upsample } => {
                    if *upsample {
                        x = b.upsample2x(x)?;
                    }
                    let modulated = b.channel_scale(x, s)?;
                    let (w, bias) = (b.constant(weight.clone()), b.constant(bias.clone()));
                    let y = b.conv2d(modulated, w, Some(bias))?;
                    x = b.leaky_relu(y)?;
                }
                SynthLayer::ToRgb { weight, bias } => {
                    let modulated = b.channel_scale(x, s)?;
                    let (w, bias) = (b.constant(weight.clone()), b.constant(bias.clone()));
                    let y = b.conv2d(modulated, w, Some(bias))?;
                    rgb = Some(match rgb {
                        None => y,
                        Some(prev) => {
                            let prev = if b.node_shape(prev)? != b.node_shape(y)? {
                                b.upsample2x(prev)?
                            } else {
                                prev
                            };
                            b.add(prev, y)?
                        }
                    });
                }
            }
        }
        let mut out = rgb.ok_or_else(|| Error::UnsupportedSpec("no tRGB layer".into()))?;
        if let Some(p) = &self.planted {
            out = b.affine(out, p.base_gain, 0.0)?;
            let res = self.resolution();
            for (&s, proj) in styles.iter().zip(&p.per_layer) {
                if let Some(proj) = proj {
                    let pm = b.constant(proj.clone());
                    let flat = b.matmul(pm, s)?;
                    let term = b.reshape(flat, &[COLOR_CHANNELS, res, res])?;
                    out = b.add(out, term)?;
                }
            }
        }
        Ok(out)
    }

    /// Image `[3, h, w]` in `(0, 1)` from style nodes.
    pub fn build_synthesis(&self, b: &mut GraphBuilder, styles: &[NodeId]) -> Result<NodeId> {
        let pre = self.build_pre_sigmoid(b, styles)?;
        b.sigmoid(pre)
    }

    /// Graph `styles -> image` with outputs `image` and `pre_sigmoid`.
    pub fn synthesis_graph(&self) -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut b = GraphBuilder::new();
        let styles = self.style_inputs(&mut b)?;
        let pre = self.build_pre_sigmoid(&mut b, &styles)?;
        let image = b.sigmoid(pre)?;
        b.output("pre_sigmoid", pre)?;
        b.output("image", image)?;
        Ok((b.finish(), styles, image))
    }

    pub fn style_bindings(&self, s: &StyleVector) -> Result<Bindings> {
        s.check_matches(self.spec())?;
        s.layers()
            .iter()
            .enumerate()
            .map(|(i, v)| Ok((style_input_name(i), Tensor::vector(v.clone())?)))
            .collect()
    }

    pub fn synthesize(&self, s: &StyleVector) -> Result<Tensor> {
        let (g, _, image) = self.synthesis_graph()?;
        let eval = forward_eval(&g, &self.style_bindings(s)?)?;
        Ok(eval.value(image).clone())
    }

    /// Pre-sigmoid colour values, for saturation checks.
    pub fn synthesize_pre_sigmoid(&self, s: &StyleVector) -> Result<Tensor> {
        let (g, _, _) = self.synthesis_graph()?;
        let eval = forward_eval(&g, &self.style_bindings(s)?)?;
        Ok(eval.output(&g, "pre_sigmoid")?.clone())
    }

    /// Synthesis where layers `< k` use `s` and layers `>= k` use `s_avg`.
    pub fn synthesize_truncated(&self, s: &StyleVector, k: usize, s_avg: &StyleVector) -> Result<Tensor> {
        if k > self.spec().len() {
            return Err(Error::InvalidArgument(format!(
                "truncation depth {k} outside 0..={}",
                self.spec().len()
            )));
        }
        s.check_matches(self.spec())?;
        s_avg.check_matches(self.spec())?;
        let mixed = StyleVector::new(
            (0..self.spec().len())
                .map(|i| if i < k { s.layer(i).to_vec() } else { s_avg.layer(i).to_vec() })
                .collect(),
        );
        self.synthesize(&mixed)
    }

    /// Mean style over `n >= 100` latent samples of stream `seed`.
    pub fn average_style(&self, n: usize, seed: u64) -> Result<StyleVector> {
        if n < 100 {
            return Err(Error::InvalidArgument(format!("average style needs >= 100 samples, got {n}")));
        }
        let styles = (0..n as u64)
            .map(|i| self.style_from_z(&self.sample_z(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        StyleVector::mean(&styles)
    }

    /// Copy with every weight that reads style channel `id` set to zero, so
    /// the channel no longer influences the image.
    pub fn with_silenced_channel(&self, id: ChannelId) -> Result<Generator> {
        self.spec().flat_index(id)?;
        let mut g = self.clone();
        let net = g
            .synthesis
            .as_mut()
            .ok_or_else(|| Error::UnsupportedSpec("no synthesis network".into()))?;
        let weight = match &mut net.layers[id.layer] {
            SynthLayer::Conv { weight, .. } | SynthLayer::ToRgb { weight, .. } => weight,
        };
        let shape = weight.shape().to_vec();
        let (co, ci, kk) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut data = weight.data().to_vec();
        for o in 0..co {
            let start = (o * ci + id.channel) * kk;
            data[start..start + kk].iter_mut().for_each(|v| *v = 0.0);
        }
        *weight = Arc::new(Tensor::new(shape, data)?);
        if let Some(p) = g.planted.as_mut() {
            if let Some(Some(proj)) = p.per_layer.get_mut(id.layer) {
                let (rows, cols) = (proj.shape()[0], proj.shape()[1]);
                let mut data = proj.data().to_vec();
                (0..rows).for_each(|r| data[r * cols + id.channel] = 0.0);
                *proj = Arc::new(Tensor::new(vec![rows, cols], data)?);
            }
        }
        g.refresh_fingerprint();
        Ok(g)
    }

    /// Copy whose affine row for `id` is zero, making `s_id = b_id` constant.
    pub fn with_constant_style(&self, id: ChannelId) -> Result<Generator> {
        self.spec().flat_index(id)?;
        let mut g = self.clone();
        let aff = &mut g.affines[id.layer];
        let w = self.config.w_dim;
        let mut data = aff.a.data().to_vec();
        data[id.channel * w..(id.channel + 1) * w].iter_mut().for_each(|v| *v = 0.0);
        aff.a = Arc::new(Tensor::new(aff.a.shape().to_vec(), data)?);
        g.refresh_fingerprint();
        Ok(g)
    }

    pub(crate) fn with_planted(mut self, readout: PlantedReadout) -> Generator {
        self.planted = Some(readout);
        self.refresh_fingerprint();
        self
    }

    /// Bias of the mapping's first layer and the rest of the bias-only path,
    /// exposed for hand traces in tests.
    pub fn mapping_weights(&self) -> [&Tensor; 4] {
        [&self.mapping.w1, &self.mapping.b1, &self.mapping.w2, &self.mapping.b2]
    }

    pub fn affine_weights(&self, layer: usize) -> (&Tensor, &Tensor) {
        (&self.affines[layer].a, &self.affines[layer].b)
    }
}

pub fn style_input_name(layer: usize) -> String {
    format!("s{layer}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn toy() -> Generator {
        Generator::new(GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn zero_latent_follows_bias_path() {
        let g = toy();
        let [_, b1, w2, b2] = g.mapping_weights();
        // h = lrelu(b1); w = W2 h + b2
        let h: Vec<f64> = b1.data().iter().map(|&x| if x > 0.0 { x } else { 0.2 * x }).collect();
        let expected: Vec<f64> = (0..16)
            .map(|i| (0..16).map(|j| w2.data()[i * 16 + j] * h[j]).sum::<f64>() + b2.data()[i])
            .collect();
        let w = g.map_latent(&Tensor::zeros(&[16])).unwrap();
        for (a, e) in w.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn mapping_is_deterministic_and_nonlinear() {
        let g = toy();
        let z = g.sample_z(3, 0);
        assert_eq!(g.map_latent(&z).unwrap(), g.map_latent(&z).unwrap());
        let z2 = Tensor::vector(z.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (w0, w1, w2) = (
            g.map_latent(&Tensor::zeros(&[16])).unwrap(),
            g.map_latent(&z).unwrap(),
            g.map_latent(&z2).unwrap(),
        );
        assert_ne!(w1, w2);
        // an affine map would satisfy w(2z) - w(0) = 2 (w(z) - w(0))
        let affine_gap = w2
            .data()
            .iter()
            .zip(w1.data())
            .zip(w0.data())
            .map(|((a, b), c)| (a - c - 2.0 * (b - c)).abs())
            .fold(0.0, f64::max);
        assert!(affine_gap > 1e-3);
        assert!(g.map_latent(&Tensor::zeros(&[15])).is_err());
    }

    #[test]
    fn style_affine_identities() {
        let g = toy();
        let zero = g.style_from_w(&Tensor::zeros(&[16])).unwrap();
        for i in 0..g.spec().len() {
            assert_eq!(zero.layer(i), g.affine_weights(i).1.data());
        }
        let w1 = g.map_latent(&g.sample_z(1, 0)).unwrap();
        let w2 = g.map_latent(&g.sample_z(1, 1)).unwrap();
        let sum = Tensor::vector(w1.data().iter().zip(w2.data()).map(|(a, b)| a + b).collect()).unwrap();
        let (s12, s2, s1) = (
            g.style_from_w(&sum).unwrap().flatten(),
            g.style_from_w(&w2).unwrap().flatten(),
            g.style_from_w(&w1).unwrap().flatten(),
        );
        let z = zero.flatten();
        for i in 0..s12.len() {
            assert!(((s12[i] - s2[i]) - (s1[i] - z[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_mirror_styles_without_synthesis() {
        let g = Generator::new(GeneratorConfig::with_spec(LayerSpec::paper_mirror())).unwrap();
        assert!(!g.can_synthesize());
        let s = g.style_from_z(&g.sample_z(0, 0)).unwrap();
        assert_eq!(s.flatten().len(), 9088);
        assert!(matches!(g.synthesize(&s), Err(Error::UnsupportedSpec(_))));
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let g = toy();
        let s = g.style_from_z(&g.sample_z(42, 0)).unwrap();
        let a = g.synthesize(&s).unwrap();
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert_eq!(a, g.synthesize(&s).unwrap());
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let mut same = s.clone();
        let id = ChannelId::new(3, 5);
        same.set(id, s.get(id).unwrap() + 0.0).unwrap();
        assert_eq!(a, g.synthesize(&same).unwrap());
        assert!(g.synthesize(&StyleVector::zeros(&LayerSpec::tiny8())).is_err());
    }

    #[test]
    fn pre_sigmoid_is_unsaturated_at_init() {
        let g = toy();
        let mut extreme: f64 = 0.0;
        for i in 0..50 {
            let s = g.style_from_z(&g.sample_z(11, i)).unwrap();
            let pre = g.synthesize_pre_sigmoid(&s).unwrap();
            extreme = pre.data().iter().fold(extreme, |m, v| m.max(v.abs()));
        }
        assert!(extreme <= 4.0, "pre-sigmoid magnitude {extreme}");
    }

    #[test]
    fn mean_pixel_grad_check_every_layer() {
        let g = Generator::new(GeneratorConfig::with_spec(LayerSpec::tiny8())).unwrap();
        let s = g.style_from_z(&g.sample_z(5, 0)).unwrap();
        let mut b = GraphBuilder::new();
        let styles = g.style_inputs(&mut b).unwrap();
        let img = g.build_synthesis(&mut b, &styles).unwrap();
        let mean = b.sum(img).unwrap();
        let graph = b.finish();
        let bind = g.style_bindings(&s).unwrap();
        for i in 0..g.spec().len() {
            let err = grad_check(&graph, &bind, mean, &style_input_name(i), 1e-5).unwrap();
            assert!(err < 1e-5, "layer {i}: {err}");
        }
    }

    #[test]
    fn truncation_endpoints() {
        let g = toy();
        let avg = g.average_style(100, 9).unwrap();
        let s = g.style_from_z(&g.sample_z(1, 0)).unwrap();
        let l = g.spec().len();
        assert_eq!(g.synthesize_truncated(&s, l, &avg).unwrap(), g.synthesize(&s).unwrap());
        let other = g.style_from_z(&g.sample_z(1, 1)).unwrap();
        assert_eq!(
            g.synthesize_truncated(&s, 0, &avg).unwrap(),
            g.synthesize_truncated(&other, 0, &avg).unwrap()
        );
        let mid = g.synthesize_truncated(&s, 5, &avg).unwrap();
        assert_ne!(mid, g.synthesize(&s).unwrap());
        assert_ne!(mid, g.synthesize_truncated(&s, 0, &avg).unwrap());
        assert!(g.synthesize_truncated(&s, l + 1, &avg).is_err());
        assert!(g.average_style(99, 0).is_err());
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let a = toy();
        assert_eq!(a.fingerprint(), toy().fingerprint());
        let other = Generator::new(GeneratorConfig {
            weight_seed: 43,
            ..GeneratorConfig::default()
        })
        .unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
        assert_ne!(a.fingerprint(), a.with_silenced_channel(ChannelId::new(0, 0)).unwrap().fingerprint());
    }
}
