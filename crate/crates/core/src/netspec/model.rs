//! The attention network graph: residual blocks built from basic blocks with
//! a width-1 shortcut convolution, channel/spatial attention in one hosting
//! block, average pooling, then a fully-connected head. Forward passes cache
//! what the hand-written backward passes need.

use super::NetworkConfig;
use crate::engine::ops::{self, ConvCache, Param, Param1, Param2, Param3, ParamView};
use crate::Result;
use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn he_uniform(fan_in: usize, rng: &mut ChaCha12Rng) -> impl FnMut() -> f64 + '_ {
    let limit = (6.0 / fan_in as f64).sqrt();
    move || (rng.gen::<f64>() * 2.0 - 1.0) * limit
}

struct Conv1d {
    w: Param3,
    b: Param1,
    stride: usize,
    cache: Option<ConvCache>,
}

impl Conv1d {
    fn new(c_out: usize, c_in: usize, k: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut init = he_uniform(c_in * k, rng);
        let w = Array3::from_shape_simple_fn((c_out, c_in, k), &mut init);
        drop(init);
        Conv1d { w: Param::new(w), b: Param::new(Array1::zeros(c_out)), stride, cache: None }
    }

    /// Width-1 convolution passing each channel through unchanged.
    fn identity(channels: usize) -> Self {
        let mut w = Array3::zeros((channels, channels, 1));
        for c in 0..channels {
            w[[c, c, 0]] = 1.0;
        }
        Conv1d { w: Param::new(w), b: Param::new(Array1::zeros(channels)), stride: 1, cache: None }
    }

    fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let (y, cache) = ops::conv1d_forward(x, &self.w.value, &self.b.value, self.stride);
        self.cache = Some(cache);
        y
    }

    fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let cache = self.cache.as_ref().expect("conv backward before forward");
        let (gx, gw, gb) = ops::conv1d_backward(gy, &self.w.value, self.stride, cache);
        self.w.grad += &gw;
        self.b.grad += &gb;
        gx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView)) {
        self.w.expose(format!("{prefix}.w"), f);
        self.b.expose(format!("{prefix}.b"), f);
    }
}

#[derive(Default)]
struct Relu3 {
    y: Option<Array3<f64>>,
}

impl Relu3 {
    fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let y = ops::relu_forward(x);
        self.y = Some(y.clone());
        y
    }

    fn backward(&self, gy: &Array3<f64>) -> Array3<f64> {
        ops::relu_backward(gy, self.y.as_ref().expect("relu backward before forward"))
    }
}

#[derive(Default)]
struct Relu2 {
    y: Option<Array2<f64>>,
}

impl Relu2 {
    fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = ops::relu_forward(x);
        self.y = Some(y.clone());
        y
    }

    fn backward(&self, gy: &Array2<f64>) -> Array2<f64> {
        ops::relu_backward(gy, self.y.as_ref().expect("relu backward before forward"))
    }
}

struct Dense {
    w: Param2,
    b: Param1,
    x: Option<Array2<f64>>,
}

impl Dense {
    fn new(f_in: usize, f_out: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut init = he_uniform(f_in, rng);
        let w = Array2::from_shape_simple_fn((f_in, f_out), &mut init);
        drop(init);
        Dense { w: Param::new(w), b: Param::new(Array1::zeros(f_out)), x: None }
    }

    fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.x = Some(x.clone());
        ops::dense_forward(x, &self.w.value, &self.b.value)
    }

    fn backward(&mut self, gy: &Array2<f64>) -> Array2<f64> {
        let x = self.x.as_ref().expect("dense backward before forward");
        let (gx, gw, gb) = ops::dense_backward(gy, x, &self.w.value);
        self.w.grad += &gw;
        self.b.grad += &gb;
        gx
    }

    fn backward_data(&self, gy: &Array2<f64>) -> Array2<f64> {
        ops::dense_backward_data(gy, &self.w.value)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView)) {
        self.w.expose(format!("{prefix}.w"), f);
        self.b.expose(format!("{prefix}.b"), f);
    }
}

struct Dropout {
    rate: f64,
    mask: Option<Array2<f64>>,
}

impl Dropout {
    fn forward(
        &mut self,
        x: &Array2<f64>,
        mode: Mode,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Array2<f64> {
        match mode {
            Mode::Train => {
                let rng = rng.expect("training forward needs an rng for dropout");
                let m = ops::dropout_mask(x.nrows(), x.ncols(), self.rate, rng);
                let y = x * &m;
                self.mask = Some(m);
                y
            }
            Mode::Eval => {
                self.mask = None;
                x.clone()
            }
        }
    }

    fn backward(&self, gy: &Array2<f64>) -> Array2<f64> {
        match &self.mask {
            Some(m) => gy * m,
            None => gy.clone(),
        }
    }
}

struct ChannelAttnCache {
    x: Array3<f64>,
    gap: Array2<f64>,
    gmp: Array2<f64>,
    gmp_arg: Array2<usize>,
    h_avg: Array2<f64>,
    h_max: Array2<f64>,
    m: Array2<f64>,
}

/// Channel attention: sigmoid(MLP(GAP(F)) + MLP(GMP(F))) broadcast over time,
/// multiplied elementwise with F. The two paths share one bottleneck MLP.
pub struct ChannelAttention {
    pub(crate) w1: Param2,
    pub(crate) b1: Param1,
    pub(crate) w2: Param2,
    pub(crate) b2: Param1,
    cache: Option<ChannelAttnCache>,
}

impl ChannelAttention {
    pub fn new(channels: usize, ratio: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(ratio >= 1 && channels % ratio == 0, "ratio must divide channels");
        let hidden = channels / ratio;
        let w1 = {
            let mut init = he_uniform(channels, rng);
            Array2::from_shape_simple_fn((channels, hidden), &mut init)
        };
        let w2 = {
            let mut init = he_uniform(hidden, rng);
            Array2::from_shape_simple_fn((hidden, channels), &mut init)
        };
        ChannelAttention {
            w1: Param::new(w1),
            b1: Param::new(Array1::zeros(hidden)),
            w2: Param::new(w2),
            b2: Param::new(Array1::zeros(channels)),
            cache: None,
        }
    }

    fn mlp(&self, v: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = ops::relu_forward(&ops::dense_forward(v, &self.w1.value, &self.b1.value));
        let out = ops::dense_forward(&h, &self.w2.value, &self.b2.value);
        (h, out)
    }

    pub fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        assert_eq!(x.dim().1, self.w1.value.nrows(), "channel count mismatch");
        let gap = ops::gap_forward(x);
        let (gmp, gmp_arg) = ops::gmp_forward(x);
        let (h_avg, a_avg) = self.mlp(&gap);
        let (h_max, a_max) = self.mlp(&gmp);
        let m = ops::sigmoid_forward(&(a_avg + a_max));
        let y = ops::scale_channels_forward(x, &m);
        self.cache = Some(ChannelAttnCache { x: x.clone(), gap, gmp, gmp_arg, h_avg, h_max, m });
        y
    }

    pub fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let c = self.cache.as_ref().expect("attention backward before forward");
        let t = c.x.dim().2;
        let (mut gx, gm) = ops::scale_channels_backward(gy, &c.x, &c.m);
        let ga = ops::sigmoid_backward(&gm, &c.m);

        // Both MLP paths receive the same upstream gradient; parameter grads
        // accumulate across them because the MLP is shared.
        let (gh, gw2, gb2) = ops::dense_backward(&ga, &c.h_avg, &self.w2.value);
        let gh = ops::relu_backward(&gh, &c.h_avg);
        let (ggap, gw1, gb1) = ops::dense_backward(&gh, &c.gap, &self.w1.value);
        self.w2.grad += &gw2;
        self.b2.grad += &gb2;
        self.w1.grad += &gw1;
        self.b1.grad += &gb1;

        let (gh, gw2, gb2) = ops::dense_backward(&ga, &c.h_max, &self.w2.value);
        let gh = ops::relu_backward(&gh, &c.h_max);
        let (ggmp, gw1, gb1) = ops::dense_backward(&gh, &c.gmp, &self.w1.value);
        self.w2.grad += &gw2;
        self.b2.grad += &gb2;
        self.w1.grad += &gw1;
        self.b1.grad += &gb1;

        gx += &ops::gap_backward(&ggap, t);
        gx += &ops::gmp_backward(&ggmp, &c.gmp_arg, t);
        gx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView)) {
        self.w1.expose(format!("{prefix}.mlp1.w"), f);
        self.b1.expose(format!("{prefix}.mlp1.b"), f);
        self.w2.expose(format!("{prefix}.mlp2.w"), f);
        self.b2.expose(format!("{prefix}.mlp2.b"), f);
    }
}

struct SpatialAttnCache {
    x: Array3<f64>,
    max_arg: Array2<usize>,
    m: Array2<f64>,
}

/// Spatial attention: channel-average and channel-max maps stacked into a
/// 2-channel sequence, convolved, passed through a sigmoid, and multiplied
/// per timestep with F.
pub struct SpatialAttention {
    conv: Conv1d,
    cache: Option<SpatialAttnCache>,
}

impl SpatialAttention {
    pub fn new(kernel: usize, rng: &mut ChaCha12Rng) -> Self {
        SpatialAttention { conv: Conv1d::new(1, 2, kernel, 1, rng), cache: None }
    }

    pub fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let (batch, _c, t) = x.dim();
        let ap = ops::channel_mean_forward(x);
        let (mp, max_arg) = ops::channel_max_forward(x);
        let mut z = Array3::<f64>::zeros((batch, 2, t));
        z.slice_mut(s![.., 0, ..]).assign(&ap);
        z.slice_mut(s![.., 1, ..]).assign(&mp);
        let conv_out = self.conv.forward(&z);
        let m = ops::sigmoid_forward(&conv_out.index_axis(ndarray::Axis(1), 0).to_owned());
        let y = ops::scale_time_forward(x, &m);
        self.cache = Some(SpatialAttnCache { x: x.clone(), max_arg, m });
        y
    }

    pub fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let cache = self.cache.as_ref().expect("attention backward before forward");
        let (batch, c, t) = cache.x.dim();
        let (mut gx, gm) = ops::scale_time_backward(gy, &cache.x, &cache.m);
        let gs = ops::sigmoid_backward(&gm, &cache.m);
        let gs3 = gs.into_shape((batch, 1, t)).unwrap();
        let gz = self.conv.backward(&gs3);
        let g_ap = gz.index_axis(ndarray::Axis(1), 0).to_owned();
        let g_mp = gz.index_axis(ndarray::Axis(1), 1).to_owned();
        gx += &ops::channel_mean_backward(&g_ap, c);
        gx += &ops::channel_max_backward(&g_mp, &cache.max_arg, c);
        gx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
}

struct BasicBlock {
    conv1: Conv1d,
    relu1: Relu3,
    conv2: Conv1d,
    relu2: Relu3,
}

impl BasicBlock {
    fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha12Rng) -> Self {
        BasicBlock {
            conv1: Conv1d::new(c_out, c_in, k, 1, rng),
            relu1: Relu3::default(),
            conv2: Conv1d::new(c_out, c_out, k, 1, rng),
            relu2: Relu3::default(),
        }
    }

    fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let y = self.relu1.forward(&self.conv1.forward(x));
        self.relu2.forward(&self.conv2.forward(&y))
    }

    fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let g = self.conv2.backward(&self.relu2.backward(gy));
        self.conv1.backward(&self.relu1.backward(&g))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }
}

struct ResidualBlock {
    basics: Vec<BasicBlock>,
    shortcut: Conv1d,
    post_relu: Relu3,
    attention: Option<(ChannelAttention, SpatialAttention)>,
    pool_size: usize,
    pool_stride: usize,
    pool_t_in: usize,
}

impl ResidualBlock {
    fn forward(&mut self, x: &Array3<f64>) -> Array3<f64> {
        let mut branch = x.clone();
        for bb in &mut self.basics {
            branch = bb.forward(&branch);
        }
        branch += &self.shortcut.forward(x);
        let mut y = self.post_relu.forward(&branch);
        if let Some((ca, sa)) = &mut self.attention {
            y = sa.forward(&ca.forward(&y));
        }
        self.pool_t_in = y.dim().2;
        ops::avg_pool1d_forward(&y, self.pool_size, self.pool_stride)
    }

    fn backward(&mut self, gy: &Array3<f64>) -> Array3<f64> {
        let mut g = ops::avg_pool1d_backward(gy, self.pool_t_in, self.pool_size, self.pool_stride);
        if let Some((ca, sa)) = &mut self.attention {
            g = ca.backward(&sa.backward(&g));
        }
        let g = self.post_relu.backward(&g);
        let mut gx = self.shortcut.backward(&g);
        let mut gb = g;
        for bb in self.basics.iter_mut().rev() {
            gb = bb.backward(&gb);
        }
        gx += &gb;
        gx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamView)) {
        for (i, bb) in self.basics.iter_mut().enumerate() {
            bb.visit(&format!("{prefix}.basic{i}"), f);
        }
        self.shortcut.visit(&format!("{prefix}.shortcut"), f);
        if let Some((ca, sa)) = &mut self.attention {
            ca.visit(&format!("{prefix}.cbam.channel"), f);
            sa.visit(&format!("{prefix}.cbam.spatial"), f);
        }
    }
}

/// The assembled network. Forward passes record the post-final-pooling
/// feature map and the pre-softmax logits, the two taps the analysis stage
/// reads.
pub struct ModelGraph {
    cfg: NetworkConfig,
    blocks: Vec<ResidualBlock>,
    fcs: Vec<Dense>,
    fc_relus: Vec<Relu2>,
    fc_dropouts: Vec<Option<Dropout>>,
    head: Dense,
    flatten_c: usize,
    flatten_t: usize,
    tap_pool: Option<Array3<f64>>,
    tap_logits: Option<Array2<f64>>,
}

pub fn build_attention_network(cfg: &NetworkConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(cfg.n3);
    let mut c_in = 1usize;
    let mut t = cfg.input_length;
    for i in 0..cfg.n3 {
        let c_out = cfg.filters_per_block[i];
        let host = cfg.cbam.enabled && i == cfg.cbam.residual_block_index;
        if host && cfg.cbam.spatial_kernel > t {
            return Err(crate::Error::Config(format!(
                "cbam.spatial_kernel {} wider than the hosting feature map ({t} timesteps)",
                cfg.cbam.spatial_kernel
            )));
        }
        let mut basics = Vec::with_capacity(cfg.n2);
        for j in 0..cfg.n2 {
            let cin = if j == 0 { c_in } else { c_out };
            basics.push(BasicBlock::new(cin, c_out, cfg.conv_kernel, &mut rng));
        }
        let shortcut = if c_in == c_out {
            Conv1d::identity(c_out)
        } else {
            Conv1d::new(c_out, c_in, 1, 1, &mut rng)
        };
        let attention = if host {
            let ca = ChannelAttention::new(c_out, cfg.cbam.reduction_ratio, &mut rng);
            let sa = SpatialAttention::new(cfg.cbam.spatial_kernel, &mut rng);
            Some((ca, sa))
        } else {
            None
        };
        blocks.push(ResidualBlock {
            basics,
            shortcut,
            post_relu: Relu3::default(),
            attention,
            pool_size: cfg.pool_size,
            pool_stride: cfg.pool_stride,
            pool_t_in: 0,
        });
        t = ops::pooled_len(t, cfg.pool_size, cfg.pool_stride);
        c_in = c_out;
    }

    let flatten = c_in * t;
    let mut fcs = Vec::with_capacity(cfg.n1);
    let mut fc_relus = Vec::with_capacity(cfg.n1);
    let mut fc_dropouts = Vec::with_capacity(cfg.n1);
    let mut width = flatten;
    for i in 0..cfg.n1 {
        fcs.push(Dense::new(width, cfg.fc_hidden_units, &mut rng));
        fc_relus.push(Relu2::default());
        fc_dropouts.push(
            cfg.dropout_rates.get(i).map(|&rate| Dropout { rate, mask: None }),
        );
        width = cfg.fc_hidden_units;
    }
    let head = Dense::new(width, cfg.n_classes, &mut rng);

    Ok(ModelGraph {
        cfg: cfg.clone(),
        blocks,
        fcs,
        fc_relus,
        fc_dropouts,
        head,
        flatten_c: c_in,
        flatten_t: t,
        tap_pool: None,
        tap_logits: None,
    })
}

impl ModelGraph {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// `(channels, timesteps)` entering the flatten stage.
    pub fn flatten_dim(&self) -> (usize, usize) {
        (self.flatten_c, self.flatten_t)
    }

    /// Forward pass over `(batch, input_length)` rows, returning pre-softmax
    /// logits. Training mode needs an rng whenever dropout is configured.
    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        mode: Mode,
        mut rng: Option<&mut ChaCha12Rng>,
    ) -> Array2<f64> {
        let (batch, d) = x.dim();
        assert_eq!(d, self.cfg.input_length, "trace length mismatch");
        let mut h3 = x.clone().into_shape((batch, 1, d)).unwrap();
        for block in &mut self.blocks {
            h3 = block.forward(&h3);
        }
        self.tap_pool = Some(h3.clone());
        let mut h = h3.into_shape((batch, self.flatten_c * self.flatten_t)).unwrap();
        for i in 0..self.fcs.len() {
            h = self.fcs[i].forward(&h);
            h = self.fc_relus[i].forward(&h);
            if let Some(dp) = &mut self.fc_dropouts[i] {
                h = dp.forward(&h, mode, rng.as_deref_mut());
            }
        }
        let logits = self.head.forward(&h);
        self.tap_logits = Some(logits.clone());
        logits
    }

    /// Reverse pass from a logit gradient; accumulates parameter gradients
    /// and returns the gradient at the input rows.
    pub fn backward_from_logits(&mut self, dlogits: &Array2<f64>) -> Array2<f64> {
        let mut g = self.head.backward(dlogits);
        for i in (0..self.fcs.len()).rev() {
            if let Some(dp) = &self.fc_dropouts[i] {
                g = dp.backward(&g);
            }
            g = self.fc_relus[i].backward(&g);
            g = self.fcs[i].backward(&g);
        }
        let batch = g.nrows();
        let mut g3 = g.into_shape((batch, self.flatten_c, self.flatten_t)).unwrap();
        for block in self.blocks.iter_mut().rev() {
            g3 = block.backward(&g3);
        }
        let d = self.cfg.input_length;
        g3.into_shape((batch, d)).unwrap()
    }

    /// Gradient of a logit-space seed w.r.t. the post-final-pooling tap,
    /// computed from the cached forward state without touching any parameter
    /// gradient. Used by the saliency analysis.
    pub fn backward_data_to_tap(&self, dlogits: &Array2<f64>) -> Array3<f64> {
        let mut g = self.head.backward_data(dlogits);
        for i in (0..self.fcs.len()).rev() {
            if let Some(dp) = &self.fc_dropouts[i] {
                g = dp.backward(&g);
            }
            g = self.fc_relus[i].backward(&g);
            g = self.fcs[i].backward_data(&g);
        }
        let batch = g.nrows();
        g.into_shape((batch, self.flatten_c, self.flatten_t)).unwrap()
    }

    /// Feature map after the last pooling stage, `(batch, channels, T')`.
    pub fn tap_post_final_pooling(&self) -> Option<&Array3<f64>> {
        self.tap_pool.as_ref()
    }

    /// Pre-softmax class scores from the last forward pass.
    pub fn tap_pre_softmax(&self) -> Option<&Array2<f64>> {
        self.tap_logits.as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p: ParamView| {
            for g in p.grad.iter_mut() {
                *g = 0.0;
            }
        });
    }

    /// Visits every parameter in a fixed order under stable dotted names.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(ParamView)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("block{i}"), f);
        }
        for (i, fc) in self.fcs.iter_mut().enumerate() {
            fc.visit(&format!("fc{i}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p: ParamView| n += p.value.len());
        n
    }
}
