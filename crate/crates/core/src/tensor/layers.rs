use super::Tensor;
use crate::error::{Error, Result};

/// Variance stabilizer added inside the batch-norm square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Output extent of a valid (unpadded) convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input < kernel {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Learnable state of one Conv → BN → ReLU block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[out_channels, in_channels, kernel_h, kernel_w]`
    pub kernel: Tensor,
    pub bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
    pub stride: (usize, usize),
}

impl LayerParams {
    /// Zero kernel and bias, identity batch norm (gamma 1, beta 0, running mean 0, running var 1).
    pub fn new(out_channels: usize, in_channels: usize, kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            kernel: Tensor::zeros(&[out_channels, in_channels, kernel.0, kernel.1]),
            bias: Tensor::zeros(&[out_channels]),
            bn_gamma: Tensor::full(&[out_channels], 1.0),
            bn_beta: Tensor::zeros(&[out_channels]),
            bn_running_mean: Tensor::zeros(&[out_channels]),
            bn_running_var: Tensor::full(&[out_channels], 1.0),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.rank() != 4 {
            return Err(Error::shape("layer kernel", "rank 4", self.kernel.rank()));
        }
        let oc = self.out_channels();
        for (name, t) in [
            ("layer bias", &self.bias),
            ("bn gamma", &self.bn_gamma),
            ("bn beta", &self.bn_beta),
            ("bn running mean", &self.bn_running_mean),
            ("bn running var", &self.bn_running_var),
        ] {
            if t.shape() != [oc] {
                return Err(Error::shape(name, format!("[{oc}]"), format!("{:?}", t.shape())));
            }
        }
        if self.bn_running_var.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Precondition("running variance must be positive".into()));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Precondition("strides must be positive".into()));
        }
        Ok(())
    }

    pub fn conv(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.kernel, &self.bias, self.stride)
    }

    pub fn batchnorm(&self, input: &Tensor, mode: BnMode) -> Result<(Tensor, BatchNormCache)> {
        batchnorm_forward(
            input,
            &self.bn_gamma,
            &self.bn_beta,
            &self.bn_running_mean,
            &self.bn_running_var,
            mode,
        )
    }

    /// Folds the batch statistics recorded in a train-mode cache into the running statistics.
    pub fn update_running_stats(&mut self, cache: &BatchNormCache) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = cache.count as f64;
        let unbias = m / (m - 1.0);
        for (c, (rm, rv)) in self
            .bn_running_mean
            .data_mut()
            .iter_mut()
            .zip(self.bn_running_var.data_mut())
            .enumerate()
        {
            *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * cache.batch_mean[c];
            *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * cache.batch_var[c] * unbias;
        }
    }
}

/// One column of a `[N, C, H, W]` tensor split into `stride` interleaved phases,
/// so a strided walk down the column becomes a contiguous slice.
struct PhaseBuffer {
    stride: usize,
    phase_len: usize,
    height: usize,
    data: Vec<f64>,
}

impl PhaseBuffer {
    fn new(height: usize, stride: usize) -> Self {
        let phase_len = height.div_ceil(stride);
        Self {
            stride,
            phase_len,
            height,
            data: vec![0.0; phase_len * stride],
        }
    }

    fn load(&mut self, src: &[f64], base: usize, width: usize, col: usize) {
        for r in 0..self.height {
            let (p, j) = (r % self.stride, r / self.stride);
            self.data[p * self.phase_len + j] = src[base + r * width + col];
        }
    }

    fn clear(&mut self) {
        self.data.fill(0.0);
    }

    fn scatter_add(&self, dst: &mut [f64], base: usize, width: usize, col: usize) {
        for r in 0..self.height {
            let (p, j) = (r % self.stride, r / self.stride);
            dst[base + r * width + col] += self.data[p * self.phase_len + j];
        }
    }

    /// Rows `tap, tap + stride, tap + 2 * stride, ...` (`len` of them).
    fn taps(&self, tap: usize, len: usize) -> &[f64] {
        let start = (tap % self.stride) * self.phase_len + tap / self.stride;
        &self.data[start..start + len]
    }

    fn taps_mut(&mut self, tap: usize, len: usize) -> &mut [f64] {
        let start = (tap % self.stride) * self.phase_len + tap / self.stride;
        &mut self.data[start..start + len]
    }
}

struct ConvGeometry {
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: (usize, usize)) -> Result<ConvGeometry> {
    let [n, ic, h, w] = input.dims4()?;
    let [oc, kic, kh, kw] = kernel.dims4()?;
    if ic != kic {
        return Err(Error::shape("conv2d input channels", kic, ic));
    }
    let oh = conv_output_extent(h, kh, stride.0).ok_or_else(|| Error::shape("conv2d height", format!(">= {kh}"), h))?;
    let ow = conv_output_extent(w, kw, stride.1).ok_or_else(|| Error::shape("conv2d width", format!(">= {kw}"), w))?;
    Ok(ConvGeometry {
        n,
        ic,
        h,
        w,
        oc,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Valid strided 2-D convolution (cross-correlation) on `[N, C, H, W]` input.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride)?;
    if bias.shape() != [g.oc] {
        return Err(Error::shape(
            "conv2d bias",
            format!("[{}]", g.oc),
            format!("{:?}", bias.shape()),
        ));
    }
    let (sh, sw) = stride;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.n * g.oc * g.oh * g.ow];
    let mut acc = vec![0.0; g.oc * g.oh];
    let mut phases = PhaseBuffer::new(g.h, sh);

    for b in 0..g.n {
        for ox in 0..g.ow {
            for (o, row) in acc.chunks_exact_mut(g.oh).enumerate() {
                row.fill(bias.data()[o]);
            }
            for c in 0..g.ic {
                let base = (b * g.ic + c) * g.h * g.w;
                for j in 0..g.kw {
                    phases.load(x, base, g.w, ox * sw + j);
                    for (o, row) in acc.chunks_exact_mut(g.oh).enumerate() {
                        for i in 0..g.kh {
                            let wv = k[((o * g.ic + c) * g.kh + i) * g.kw + j];
                            for (a, s) in row.iter_mut().zip(phases.taps(i, g.oh)) {
                                *a += wv * s;
                            }
                        }
                    }
                }
            }
            for (o, row) in acc.chunks_exact(g.oh).enumerate() {
                let obase = (b * g.oc + o) * g.oh * g.ow;
                for (t, v) in row.iter().enumerate() {
                    out[obase + t * g.ow + ox] = *v;
                }
            }
        }
    }
    Tensor::new(&[g.n, g.oc, g.oh, g.ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, kernel, stride)?;
    if grad_out.shape() != [g.n, g.oc, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d grad_out",
            format!("{:?}", [g.n, g.oc, g.oh, g.ow]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (sh, sw) = stride;
    let x = input.data();
    let k = kernel.data();
    let gy = grad_out.data();
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.oc];
    let mut dx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gcol = vec![0.0; g.oc * g.oh];
    let mut phases = PhaseBuffer::new(g.h, sh);
    let mut gphases = PhaseBuffer::new(g.h, sh);

    for b in 0..g.n {
        for ox in 0..g.ow {
            for (o, row) in gcol.chunks_exact_mut(g.oh).enumerate() {
                let obase = (b * g.oc + o) * g.oh * g.ow;
                for (t, v) in row.iter_mut().enumerate() {
                    *v = gy[obase + t * g.ow + ox];
                }
                db[o] += row.iter().sum::<f64>();
            }
            for c in 0..g.ic {
                let base = (b * g.ic + c) * g.h * g.w;
                for j in 0..g.kw {
                    let col = ox * sw + j;
                    phases.load(x, base, g.w, col);
                    if want_input {
                        gphases.clear();
                    }
                    for (o, grow) in gcol.chunks_exact(g.oh).enumerate() {
                        for i in 0..g.kh {
                            let kidx = ((o * g.ic + c) * g.kh + i) * g.kw + j;
                            dk[kidx] += grow.iter().zip(phases.taps(i, g.oh)).map(|(a, b)| a * b).sum::<f64>();
                            if want_input {
                                let wv = k[kidx];
                                for (d, gv) in gphases.taps_mut(i, g.oh).iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                    if want_input {
                        gphases.scatter_add(&mut dx, base, g.w, col);
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if want_input {
            Some(Tensor::new(input.shape(), dx)?)
        } else {
            None
        },
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: Tensor::new(&[g.oc], db)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// What the batch-norm backward pass and the running-stat update need.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mode: BnMode,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased (population) variance of the batch, per channel.
    pub batch_var: Vec<f64>,
    /// Elements per channel (batch x spatial).
    pub count: usize,
}

pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BnMode,
) -> Result<(Tensor, BatchNormCache)> {
    let [n, c, h, w] = input.dims4()?;
    for (name, t) in [
        ("bn gamma", gamma),
        ("bn beta", beta),
        ("bn running mean", running_mean),
        ("bn running var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape(name, format!("[{c}]"), format!("{:?}", t.shape())));
        }
    }
    if mode == BnMode::Train && n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let hw = h * w;
    let count = n * hw;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];

    let inv_std: Vec<f64> = match mode {
        BnMode::Train => {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    s += x[off..off + hw].iter().sum::<f64>();
                }
                let mu = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    ss += x[off..off + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / count as f64;
            }
            var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect()
        }
        BnMode::Eval => {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
            var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect()
        }
    };

    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (mu, is, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                y[i] = gm * xh + bt;
            }
        }
    }
    let cache = BatchNormCache {
        mode,
        xhat: Tensor::new(input.shape(), xhat)?,
        inv_std,
        batch_mean: mean,
        batch_var: var,
        count,
    };
    Ok((Tensor::new(input.shape(), y)?, cache))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = grad_out.dims4()?;
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape(
            "batchnorm grad_out",
            format!("{:?}", cache.xhat.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let hw = h * w;
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += gy[i] * xh[i];
                dbeta[ch] += gy[i];
            }
        }
    }
    let mut dx = vec![0.0; gy.len()];
    let m = cache.count as f64;
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let gm = gamma.data()[ch];
            let is = cache.inv_std[ch];
            match cache.mode {
                BnMode::Train => {
                    // dxhat = gy * gamma, so its sums are gamma * dbeta and gamma * dgamma.
                    let scale = gm * is / m;
                    for i in off..off + hw {
                        dx[i] = scale * (m * gy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                    }
                }
                BnMode::Eval => {
                    for i in off..off + hw {
                        dx[i] = gy[i] * gm * is;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// `output` is the forward result of [`relu`]; the subgradient at zero is zero.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, o) in g.data_mut().iter_mut().zip(output.data()) {
        if *o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// `[N, C, H, W]` → `[N, C]`, averaging over every spatial position.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let z = (h * w) as f64;
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / z)
        .collect();
    Tensor::new(&[n, c], out)
}

pub fn global_average_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = match *input_shape {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape("gap input", "rank 4", input_shape.len())),
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape(
            "gap grad_out",
            format!("[{n}, {c}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let z = (h * w) as f64;
    let mut dx = Vec::with_capacity(n * c * h * w);
    for g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g / z, h * w));
    }
    Tensor::new(input_shape, dx)
}

/// `[N, IN]` × weight `[OUT, IN]` + bias `[OUT]` → `[N, OUT]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = linear_dims(input, weight, bias)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = Vec::with_capacity(n * dout);
    for row in x.chunks_exact(din) {
        for o in 0..dout {
            let wrow = &wt[o * din..(o + 1) * din];
            out.push(bias.data()[o] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::new(&[n, dout], out)
}

fn linear_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, din) = match *input.shape() {
        [n, d] => (n, d),
        _ => return Err(Error::shape("linear input", "rank 2", input.rank())),
    };
    let (dout, win) = match *weight.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape("linear weight", "rank 2", weight.rank())),
    };
    if win != din {
        return Err(Error::shape("linear in-extent", win, din));
    }
    if bias.shape() != [dout] {
        return Err(Error::shape(
            "linear bias",
            format!("[{dout}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    Ok((n, din, dout))
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let bias_probe = Tensor::zeros(&[weight.shape()[0]]);
    let (n, din, dout) = linear_dims(input, weight, &bias_probe)?;
    if grad_out.shape() != [n, dout] {
        return Err(Error::shape(
            "linear grad_out",
            format!("[{n}, {dout}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let gy = grad_out.data();
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for b in 0..n {
        let xrow = &x[b * din..(b + 1) * din];
        let dxrow = &mut dx[b * din..(b + 1) * din];
        for o in 0..dout {
            let g = gy[b * dout + o];
            db[o] += g;
            let wrow = &wt[o * din..(o + 1) * din];
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwrow[i] += g * xrow[i];
                dxrow[i] += g * wrow[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(&[n, din], dx)?,
        weight: Tensor::new(&[dout, din], dw)?,
        bias: Tensor::new(&[dout], db)?,
    })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy of one logit vector against a class index.
/// Returns the loss and its gradient with respect to the logits (`softmax - onehot`).
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over a `[N, K]` batch and the gradient of that mean.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(Error::shape("logits", "rank 2", logits.rank())),
    };
    if labels.len() != n {
        return Err(Error::shape("labels", n, labels.len()));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let (loss, g) = cross_entropy(row, label)?;
        total += loss;
        grad.extend(g.into_iter().map(|v| v / n as f64));
    }
    Ok((total / n as f64, Tensor::new(&[n, k], grad)?))
}
