//! The voxel regression subnetwork (stacked hourglass, channels read as
//! z-slices) and the coordinate regression subnetwork (3D convolutions with
//! normalization and leaky ReLU, then a fully connected projection).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};
use crate::imaging::ImageTensor;
use crate::nn::{Graph, NodeId, NormMode, Tensor};
use crate::scheme;
use crate::volumetric::check_z_resolutions;

pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct HourglassStackConfig {
    pub num_modules: usize,
    /// `(height, width)` of the input image.
    pub input_size: (usize, usize),
    pub base_channels: usize,
    pub z_resolutions: Vec<usize>,
    /// Number of 2x poolings inside each hourglass.
    pub downsample_depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordHead {
    /// Global average pooling, then the fully connected layer.
    GlobalAvg,
    /// Flatten the last feature volume into the fully connected layer.
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordNetConfig {
    pub num_conv_layers: usize,
    pub channel_plan: Vec<usize>,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
    pub head: CoordHead,
    pub n_landmarks: usize,
}

impl CoordNetConfig {
    pub fn output_dim(&self) -> usize {
        3 * self.n_landmarks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hourglass: HourglassStackConfig,
    pub coordnet: CoordNetConfig,
    pub scheme: String,
}

impl ModelConfig {
    /// Two stacks, 64x64 input, 16x16x16 volume, 12 landmarks.
    pub fn toy() -> Self {
        Self {
            hourglass: HourglassStackConfig {
                num_modules: 2,
                input_size: (64, 64),
                base_channels: 16,
                z_resolutions: vec![1, 16],
                downsample_depth: 2,
            },
            coordnet: CoordNetConfig {
                num_conv_layers: 5,
                channel_plan: vec![8, 16, 32, 32, 32],
                strides: vec![1, 2, 2, 2, 1],
                leaky_slope: 0.01,
                head: CoordHead::GlobalAvg,
                n_landmarks: 12,
            },
            scheme: scheme::FACE12.to_string(),
        }
    }

    /// Four stacks, 256x256 input, 64x64x{1,2,4,64} volumes, 68 landmarks.
    pub fn paper() -> Self {
        Self {
            hourglass: HourglassStackConfig {
                num_modules: 4,
                input_size: (256, 256),
                base_channels: 128,
                z_resolutions: vec![1, 2, 4, 64],
                downsample_depth: 4,
            },
            coordnet: CoordNetConfig {
                num_conv_layers: 5,
                channel_plan: vec![32, 64, 128, 128, 128],
                strides: vec![1, 2, 2, 2, 1],
                leaky_slope: 0.01,
                head: CoordHead::GlobalAvg,
                n_landmarks: 68,
            },
            scheme: scheme::FACE68.to_string(),
        }
    }

    /// `(w, h, d)` of the finest volume.
    pub fn volume_dims(&self) -> [usize; 3] {
        let (h, w) = self.hourglass.input_size;
        [w / 4, h / 4, *self.hourglass.z_resolutions.last().unwrap_or(&0)]
    }

    pub fn validate(&self) -> Result<()> {
        let hg = &self.hourglass;
        if hg.num_modules == 0 || hg.base_channels < 4 || !hg.base_channels.is_multiple_of(4) {
            return Err(invalid("need at least one hourglass module and base_channels divisible by 4"));
        }
        if hg.z_resolutions.len() != hg.num_modules {
            return Err(invalid(format!(
                "{} z resolutions for {} modules",
                hg.z_resolutions.len(),
                hg.num_modules
            )));
        }
        check_z_resolutions(&hg.z_resolutions)?;
        let (h, w) = hg.input_size;
        let unit = 4 << hg.downsample_depth;
        if hg.downsample_depth == 0 || h % unit != 0 || w % unit != 0 {
            return Err(invalid(format!(
                "input {h}x{w} must be divisible by {unit} for hourglass depth {}",
                hg.downsample_depth
            )));
        }
        let cn = &self.coordnet;
        if cn.num_conv_layers == 0
            || cn.channel_plan.len() != cn.num_conv_layers
            || cn.strides.len() != cn.num_conv_layers
        {
            return Err(invalid("coordnet channel_plan and strides need one entry per conv layer"));
        }
        if cn.channel_plan.contains(&0) || cn.strides.contains(&0) || cn.n_landmarks == 0 {
            return Err(invalid("coordnet channels, strides and landmark count must be positive"));
        }
        if let Ok(s) = scheme::lookup(&self.scheme) {
            if s.n_points != cn.n_landmarks {
                return Err(invalid(format!(
                    "scheme {} has {} points but n_landmarks = {}",
                    self.scheme, s.n_points, cn.n_landmarks
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subnet {
    Voxel,
    Coord,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub subnet: Subnet,
    init: Init,
}

/// Learnable tensors plus running normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    /// Per normalization slot: `(running_mean, running_var)`.
    pub norm_stats: Vec<(Vec<f64>, Vec<f64>)>,
    pub rng_seed: u64,
    pub version: u32,
    pub voxel_pretrained: bool,
    pub coord_pretrained: bool,
}

impl ModelState {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Same tensors with every value set to zero; norm statistics reset.
    pub fn zeroed(&self) -> Self {
        let mut s = self.clone();
        for p in &mut s.params {
            p.data_mut().fill(0.0);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics (training).
    Train,
    /// Normalize with stored running statistics (inference).
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormLayer {
    gamma: usize,
    beta: usize,
    slot: usize,
}

#[derive(Clone, Debug)]
struct Residual {
    n1: NormLayer,
    c1: ConvLayer,
    n2: NormLayer,
    c2: ConvLayer,
    n3: NormLayer,
    c3: ConvLayer,
    skip: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct Hourglass {
    up1: Residual,
    low1: Residual,
    inner: Box<HourglassInner>,
    low3: Residual,
}

#[derive(Clone, Debug)]
enum HourglassInner {
    Nested(Hourglass),
    Leaf(Residual),
}

#[derive(Clone, Debug)]
struct Stack {
    hourglass: Hourglass,
    res: Residual,
    lin: ConvLayer,
    lin_norm: NormLayer,
    out: ConvLayer,
    merge: Option<(ConvLayer, ConvLayer)>,
}

#[derive(Clone, Debug)]
struct Stem {
    conv: ConvLayer,
    norm: NormLayer,
    r1: Residual,
    r2: Residual,
    r3: Residual,
}

#[derive(Clone, Debug)]
struct CoordLayers {
    convs: Vec<(ConvLayer, NormLayer)>,
    fc_w: usize,
    fc_b: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    norm_channels: Vec<usize>,
    norm_names: Vec<String>,
    subnet: Subnet,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            subnet: self.subnet,
            init,
        });
        self.specs.len() - 1
    }

    /// Convolutions carry no bias: each one feeds, possibly through
    /// identity paths, into a normalization that cancels it. Only the
    /// per-stack output projection gets one (see [`Builder::conv_biased`]).
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, dims: usize, stride: usize) -> ConvLayer {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(k, dims));
        let fan_in = cin * k.pow(dims as u32);
        let w = self.add(format!("{name}.w"), shape, Init::Uniform { fan_in });
        let b = None;
        ConvLayer {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn conv_biased(&mut self, name: &str, cin: usize, cout: usize, k: usize, dims: usize, stride: usize) -> ConvLayer {
        let mut l = self.conv(name, cin, cout, k, dims, stride);
        l.b = Some(self.add(format!("{name}.b"), vec![cout], Init::Zeros));
        l
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormLayer {
        let gamma = self.add(format!("{name}.gamma"), vec![channels], Init::Ones);
        let beta = self.add(format!("{name}.beta"), vec![channels], Init::Zeros);
        self.norm_channels.push(channels);
        self.norm_names.push(name.to_string());
        NormLayer {
            gamma,
            beta,
            slot: self.norm_channels.len() - 1,
        }
    }

    fn residual(&mut self, name: &str, cin: usize, cout: usize) -> Residual {
        let mid = (cout / 2).max(1);
        Residual {
            n1: self.norm(&format!("{name}.n1"), cin),
            c1: self.conv(&format!("{name}.c1"), cin, mid, 1, 2, 1),
            n2: self.norm(&format!("{name}.n2"), mid),
            c2: self.conv(&format!("{name}.c2"), mid, mid, 3, 2, 1),
            n3: self.norm(&format!("{name}.n3"), mid),
            c3: self.conv(&format!("{name}.c3"), mid, cout, 1, 2, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 2, 1)),
        }
    }

    fn hourglass(&mut self, name: &str, depth: usize, ch: usize) -> Hourglass {
        Hourglass {
            up1: self.residual(&format!("{name}.up1"), ch, ch),
            low1: self.residual(&format!("{name}.low1"), ch, ch),
            inner: Box::new(if depth > 1 {
                HourglassInner::Nested(self.hourglass(&format!("{name}.inner"), depth - 1, ch))
            } else {
                HourglassInner::Leaf(self.residual(&format!("{name}.low2"), ch, ch))
            }),
            low3: self.residual(&format!("{name}.low3"), ch, ch),
        }
    }
}

/// Architecture description: parameter layout plus forward builders.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    norm_channels: Vec<usize>,
    norm_names: Vec<String>,
    stem: Stem,
    stacks: Vec<Stack>,
    coord: CoordLayers,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            specs: Vec::new(),
            norm_channels: Vec::new(),
            norm_names: Vec::new(),
            subnet: Subnet::Voxel,
        };
        let hg = &config.hourglass;
        let c = hg.base_channels;
        let stem = Stem {
            conv: b.conv("g.stem.conv", 3, c / 4, 7, 2, 2),
            norm: b.norm("g.stem.norm", c / 4),
            r1: b.residual("g.stem.r1", c / 4, c / 2),
            r2: b.residual("g.stem.r2", c / 2, c / 2),
            r3: b.residual("g.stem.r3", c / 2, c),
        };
        let mut stacks = Vec::new();
        for (m, &d) in hg.z_resolutions.iter().enumerate() {
            let p = format!("g.stack{m}");
            let last = m + 1 == hg.num_modules;
            stacks.push(Stack {
                hourglass: b.hourglass(&format!("{p}.hg"), hg.downsample_depth, c),
                res: b.residual(&format!("{p}.res"), c, c),
                lin: b.conv(&format!("{p}.lin"), c, c, 1, 2, 1),
                lin_norm: b.norm(&format!("{p}.lin_norm"), c),
                out: b.conv_biased(&format!("{p}.out"), c, d, 1, 2, 1),
                merge: (!last).then(|| {
                    (
                        b.conv(&format!("{p}.merge_feat"), c, c, 1, 2, 1),
                        b.conv(&format!("{p}.merge_out"), d, c, 1, 2, 1),
                    )
                }),
            });
        }

        b.subnet = Subnet::Coord;
        let cn = &config.coordnet;
        let mut convs = Vec::new();
        let mut cin = 1;
        let mut spatial = config.volume_dims();
        for (i, (&cout, &stride)) in cn.channel_plan.iter().zip(&cn.strides).enumerate() {
            let conv = b.conv(&format!("p.conv{i}"), cin, cout, 3, 3, stride);
            let norm = b.norm(&format!("p.norm{i}"), cout);
            convs.push((conv, norm));
            cin = cout;
            for s in &mut spatial {
                *s = (*s + 2 - 3) / stride + 1;
            }
        }
        let features = match cn.head {
            CoordHead::GlobalAvg => cin,
            CoordHead::Flatten => cin * spatial.iter().product::<usize>(),
        };
        let fc_w = b.add("p.fc.w".into(), vec![cn.output_dim(), features], Init::Uniform { fan_in: features });
        let fc_b = b.add("p.fc.b".into(), vec![cn.output_dim()], Init::Zeros);

        Ok(Self {
            config,
            specs: b.specs,
            norm_channels: b.norm_channels,
            norm_names: b.norm_names,
            stem,
            stacks,
            coord: CoordLayers { convs, fc_w, fc_b },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn norm_names(&self) -> &[String] {
        &self.norm_names
    }

    pub fn norm_channels(&self) -> &[usize] {
        &self.norm_channels
    }

    /// Names of normalization slots belonging to one subnetwork.
    pub fn norm_slots(&self, subnet: Subnet) -> Vec<usize> {
        let prefix = match subnet {
            Subnet::Voxel => "g.",
            Subnet::Coord => "p.",
        };
        (0..self.norm_names.len())
            .filter(|&i| self.norm_names[i].starts_with(prefix))
            .collect()
    }

    pub fn param_count(&self, subnet: Option<Subnet>) -> usize {
        self.specs
            .iter()
            .filter(|s| subnet.is_none_or(|n| s.subnet == n))
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Parameters initialized with fan-in scaled uniform weights, zero
    /// biases and unit normalization scales.
    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                Tensor::from_vec(&s.shape, data)
            })
            .collect();
        ModelState {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            params,
            norm_stats: self
                .norm_channels
                .iter()
                .map(|&c| (vec![0.0; c], vec![1.0; c]))
                .collect(),
            rng_seed: seed,
            version: STATE_VERSION,
            voxel_pretrained: false,
            coord_pretrained: false,
        }
    }

    /// Checks that a state carries exactly this network's tensors.
    pub fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.params.len() != self.specs.len() || state.norm_stats.len() != self.norm_channels.len() {
            return Err(shape(format!(
                "state has {} tensors / {} norm slots, network needs {} / {}",
                state.params.len(),
                state.norm_stats.len(),
                self.specs.len(),
                self.norm_channels.len()
            )));
        }
        for ((spec, name), t) in self.specs.iter().zip(&state.names).zip(&state.params) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(shape(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        for (i, ((m, v), &c)) in state.norm_stats.iter().zip(&self.norm_channels).enumerate() {
            if m.len() != c || v.len() != c {
                return Err(shape(format!("norm slot {i} has wrong channel count")));
            }
        }
        Ok(())
    }

    /// Mask selecting the parameters of the given subnetworks.
    pub fn trainable_mask(&self, subnets: &[Subnet]) -> Vec<bool> {
        self.specs.iter().map(|s| subnets.contains(&s.subnet)).collect()
    }

    fn conv_node(&self, g: &mut Graph<'_>, x: NodeId, l: &ConvLayer) -> NodeId {
        let w = g.param(l.w);
        let b = l.b.map(|b| g.param(b));
        g.conv(x, w, b, l.stride, l.pad)
    }

    fn norm_node(&self, g: &mut Graph<'_>, state: &ModelState, x: NodeId, l: &NormLayer, mode: Mode) -> NodeId {
        let gamma = g.param(l.gamma);
        let beta = g.param(l.beta);
        let nm = match mode {
            Mode::Train => NormMode::Batch { slot: l.slot },
            Mode::Eval => {
                let (m, v) = &state.norm_stats[l.slot];
                NormMode::Running { mean: m, var: v }
            }
        };
        g.norm(x, gamma, beta, nm)
    }

    fn residual_node(&self, g: &mut Graph<'_>, st: &ModelState, x: NodeId, r: &Residual, mode: Mode) -> NodeId {
        let mut h = self.norm_node(g, st, x, &r.n1, mode);
        h = g.relu(h);
        h = self.conv_node(g, h, &r.c1);
        h = self.norm_node(g, st, h, &r.n2, mode);
        h = g.relu(h);
        h = self.conv_node(g, h, &r.c2);
        h = self.norm_node(g, st, h, &r.n3, mode);
        h = g.relu(h);
        h = self.conv_node(g, h, &r.c3);
        let skip = match &r.skip {
            Some(s) => self.conv_node(g, x, s),
            None => x,
        };
        g.add(h, skip)
    }

    fn hourglass_node(&self, g: &mut Graph<'_>, st: &ModelState, x: NodeId, hg: &Hourglass, mode: Mode) -> NodeId {
        let up1 = self.residual_node(g, st, x, &hg.up1, mode);
        let pooled = g.max_pool2(x);
        let low1 = self.residual_node(g, st, pooled, &hg.low1, mode);
        let low2 = match hg.inner.as_ref() {
            HourglassInner::Nested(inner) => self.hourglass_node(g, st, low1, inner, mode),
            HourglassInner::Leaf(r) => self.residual_node(g, st, low1, r, mode),
        };
        let low3 = self.residual_node(g, st, low2, &hg.low3, mode);
        let up2 = g.upsample2(low3);
        g.add(up1, up2)
    }

    /// Adds the voxel subnetwork to `g`. `images` is `(N, 3, H, W)`; returns
    /// one `(N, d_m, H/4, W/4)` node per stack.
    pub fn build_hourglass(&self, g: &mut Graph<'_>, st: &ModelState, images: NodeId, mode: Mode) -> Vec<NodeId> {
        let mut x = self.conv_node(g, images, &self.stem.conv);
        x = self.norm_node(g, st, x, &self.stem.norm, mode);
        x = g.relu(x);
        x = self.residual_node(g, st, x, &self.stem.r1, mode);
        x = g.max_pool2(x);
        x = self.residual_node(g, st, x, &self.stem.r2, mode);
        x = self.residual_node(g, st, x, &self.stem.r3, mode);

        let mut outputs = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            let hg = self.hourglass_node(g, st, x, &stack.hourglass, mode);
            let mut ll = self.residual_node(g, st, hg, &stack.res, mode);
            ll = self.conv_node(g, ll, &stack.lin);
            ll = self.norm_node(g, st, ll, &stack.lin_norm, mode);
            ll = g.relu(ll);
            let out = self.conv_node(g, ll, &stack.out);
            outputs.push(out);
            if let Some((mf, mo)) = &stack.merge {
                let a = self.conv_node(g, ll, mf);
                let b = self.conv_node(g, out, mo);
                let ab = g.add(a, b);
                x = g.add(x, ab);
            }
        }
        outputs
    }

    /// Adds the coordinate subnetwork to `g`. `volume` is `(N, d, h, w)`;
    /// returns an `(N, 3L)` node in volume coordinates.
    pub fn build_coordnet(&self, g: &mut Graph<'_>, st: &ModelState, volume: NodeId, mode: Mode) -> NodeId {
        let s = g.value(volume).shape().to_vec();
        let mut x = g.reshape(volume, &[s[0], 1, s[1], s[2], s[3]]);
        let slope = self.config.coordnet.leaky_slope;
        for (conv, norm) in &self.coord.convs {
            x = self.conv_node(g, x, conv);
            x = self.norm_node(g, st, x, norm, mode);
            x = g.leaky_relu(x, slope);
        }
        let feats = match self.config.coordnet.head {
            CoordHead::GlobalAvg => g.global_avg_pool(x),
            CoordHead::Flatten => {
                let n = g.value(x).shape()[0];
                let f = g.value(x).len() / n;
                g.reshape(x, &[n, f])
            }
        };
        let w = g.param(self.coord.fc_w);
        let b = g.param(self.coord.fc_b);
        g.linear(feats, w, b)
    }

    pub fn image_batch(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let (h, w) = self.config.hourglass.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.width() != w || img.height() != h {
                return Err(shape(format!(
                    "image is {}x{}, network expects {w}x{h}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
    }

    /// Stacks `(d, h, w)` volumes into `(N, d, h, w)` after checking they
    /// match the finest hourglass output.
    pub fn volume_batch(&self, volumes: &[&[f64]]) -> Result<Tensor> {
        let [w, h, d] = self.config.volume_dims();
        let mut data = Vec::with_capacity(volumes.len() * w * h * d);
        for v in volumes {
            if v.len() != w * h * d {
                return Err(shape(format!("volume of {} voxels, expected {w}x{h}x{d}", v.len())));
            }
            data.extend_from_slice(v);
        }
        Ok(Tensor::from_vec(&[volumes.len(), d, h, w], data))
    }

    /// `{G^m(I)}` for a batch of images, each `(N, d_m, H/4, W/4)`.
    pub fn hourglass_forward(&self, state: &ModelState, images: &[&ImageTensor], mode: Mode) -> Result<Vec<Tensor>> {
        self.check_state(state)?;
        let batch = self.image_batch(images)?;
        let mask = vec![false; state.params.len()];
        let mut g = Graph::new(&state.params, &mask);
        let input = g.input(batch);
        let outs = self.build_hourglass(&mut g, state, input, mode);
        Ok(outs.into_iter().map(|o| g.value(o).clone()).collect())
    }

    /// `P(V)` for a batch of `(d, h, w)` volumes; `(N, 3L)`.
    pub fn coordnet_forward(&self, state: &ModelState, volumes: &[&[f64]], mode: Mode) -> Result<Tensor> {
        self.check_state(state)?;
        let batch = self.volume_batch(volumes)?;
        let mask = vec![false; state.params.len()];
        let mut g = Graph::new(&state.params, &mask);
        let input = g.input(batch);
        let out = self.build_coordnet(&mut g, state, input, mode);
        Ok(g.value(out).clone())
    }

    /// `P(G^M(I))` together with every intermediate volume.
    pub fn model_forward(&self, state: &ModelState, images: &[&ImageTensor], mode: Mode) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_state(state)?;
        let batch = self.image_batch(images)?;
        let mask = vec![false; state.params.len()];
        let mut g = Graph::new(&state.params, &mask);
        let input = g.input(batch);
        let outs = self.build_hourglass(&mut g, state, input, mode);
        let coords = self.build_coordnet(&mut g, state, *outs.last().unwrap(), mode);
        Ok((
            outs.into_iter().map(|o| g.value(o).clone()).collect(),
            g.value(coords).clone(),
        ))
    }
}
